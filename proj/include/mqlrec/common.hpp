// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared vocabulary types for the whole pipeline.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace mqlrec {

using ItemId = std::string;
using UserId = std::string;
using TokenId = std::int32_t;

/// One code index per quantization level, each in [0, K).
using CodeTuple = std::vector<int>;

// Row-major so that one token / one item is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

enum class Modality { Text, Image };

inline constexpr Modality kModalities[] = {Modality::Text, Modality::Image};

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);

}  // namespace mqlrec
