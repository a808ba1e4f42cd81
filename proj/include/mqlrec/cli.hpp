// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands and their artifacts in the work dir:
//   synth             text.emb image.emb interactions.tsv [pretrain_interactions.tsv]
//   train-translator  rqvae_<modality>.ckpt rqvae_<modality>_log.csv
//   tokenize          vocab.txt codes.tsv
//   build-corpus      corpus_<stage>_{train,valid,test}.tsv
//   train             model_<stage>.ckpt train_log_<stage>.csv
//   evaluate          report_<label>_seed<seed>.{json,tsv} rankings_<label>_seed<seed>.tsv
//   report            summary.tsv aggregate.tsv
// Every command also writes manifests/<command>[_<variant>].json recording the
// config hash, seed and SHA-256 of its inputs and outputs; inputs produced by
// an earlier command are checked against that command's manifest.
// Failures exit nonzero with {"error": <kind>, "message": <text>} on stderr.

#pragma once

namespace mqlrec {

int run_cli(int argc, const char* const* argv);

}  // namespace mqlrec
