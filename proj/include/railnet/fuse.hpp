#pragma once

#include "railnet/model.hpp"

namespace railnet {

// Fold a BatchNorm into the conv that feeds it:
//   s_c = gamma_c / sqrt(var_c + eps)
//   w'[.,.,.,c] = w[.,.,.,c] * s_c
//   b'_c = (b_c - mean_c) * s_c + beta_c
// The conv's activation flag is left untouched. Throws std::invalid_argument
// on channel mismatch or non-positive var + eps.
Conv2D fold_bn_into_conv(const Conv2D& conv, const BatchNorm& bn);

// Graph-level fusion: every Conv->BN pair is folded and every ReLU directly
// fed by a (folded) conv is absorbed into its activation flag. A value that a
// ResidualAdd taps must survive unchanged, so fusion never crosses a tapped
// layer; taps on removed layers are remapped to the absorbing conv (whose
// output is identical by construction). Surviving layers keep their ids, so
// ids stay stable but become non-contiguous.
ModelGraph fuse_pass(const ModelGraph& model);

}  // namespace railnet
