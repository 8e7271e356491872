#ifndef ADAPTSENSE_LAYERS_H_
#define ADAPTSENSE_LAYERS_H_

// Small building blocks shared by the policy controller and the audio
// preview network. Sequences are [S, D] matrices, one row per step.

#include <string>
#include <utility>
#include <vector>

#include "adaptsense/params.h"
#include "adaptsense/rng.h"
#include "adaptsense/tensor.h"

namespace adaptsense {

// Row-wise affine map: X [S, in] -> X W^T + b, [S, out].
ag::Var Dense(const ag::Var& x, const ag::Var& w, const ag::Var& b);

struct LstmParams {
  ag::Var w;  // [4h, in + h], gate order i, f, g, o
  ag::Var b;  // [4h]
  int in = 0;
  int hidden = 0;
};

LstmParams AddLstm(ParamSet& ps, const std::string& name, int in, int hidden,
                   Rng& rng);

struct LstmState {
  ag::Var h;
  ag::Var c;
};

LstmState LstmZeroState(int hidden);
LstmState LstmCell(const ag::Var& x, const LstmState& s, const LstmParams& p);
// Runs over the rows of x [S, in] from a zero state; returns [S, hidden].
ag::Var LstmSequence(const ag::Var& x, const LstmParams& p, bool reverse);
// Forward and reversed passes concatenated per step, [S, 2 * hidden].
ag::Var BiLstm(const ag::Var& x, const LstmParams& fwd, const LstmParams& bwd);

struct MhaParams {
  ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
  int heads = 1;
};

MhaParams AddMha(ParamSet& ps, const std::string& name, int d_model,
                 int heads, Rng& rng);
// Scaled dot-product self-attention over the rows of x [S, D].
ag::Var MultiHeadAttention(const ag::Var& x, const MhaParams& p);

struct ConvStackParams {
  ag::Var conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;
};

// Two (conv, max-pool, relu) stages and a projection. 1-D when the input has
// rank 2 ([C, L]), 2-D when it has rank 3 ([C, H, W]).
ConvStackParams AddConvStack(ParamSet& ps, const std::string& name,
                             const ag::Shape& input, int width1, int width2,
                             int kernel, int pool, int out, Rng& rng);
ag::Var ConvStack(const ag::Var& x, const ConvStackParams& p, int pool);
// Flattened trunk size of AddConvStack for the given input.
int ConvStackTrunk(const ag::Shape& input, int width2, int pool);

}  // namespace adaptsense

#endif  // ADAPTSENSE_LAYERS_H_
