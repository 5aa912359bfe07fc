#pragma once

#include <Eigen/Dense>
#include <vector>

namespace bsa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// One B x W matrix per channel/feature. Row b is sample b of a batch,
// column w is a position inside that sample (look-back step, horizon step,
// or a single column for plain feature vectors).
using ChannelBatch = std::vector<Matrix>;

inline ChannelBatch zeros_like(const ChannelBatch& x) {
  ChannelBatch out;
  out.reserve(x.size());
  for (const auto& m : x) out.push_back(Matrix::Zero(m.rows(), m.cols()));
  return out;
}

}  // namespace bsa
