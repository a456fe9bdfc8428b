#pragma once

#include <span>
#include <vector>

#include "nodetab/choice.hpp"
#include "nodetab/tape.hpp"

namespace nodetab {

// Differentiable operations recorded on a Tape. Shapes are validated eagerly;
// every op throws std::invalid_argument on mismatch and std::runtime_error
// when a forward value comes out non-finite.

Value add(Tape& tape, const Value& a, const Value& b);
Value sub(Tape& tape, const Value& a, const Value& b);
Value mul(Tape& tape, const Value& a, const Value& b);
Value scale(Tape& tape, const Value& a, double k);
Value add_const(Tape& tape, const Value& a, double k);
Value abs_val(Tape& tape, const Value& a);
Value softplus(Tape& tape, const Value& a);

Value sum(Tape& tape, const Value& a);
Value mean(Tape& tape, const Value& a);

// (B, m, l) -> (B, l): sum over the middle axis.
Value sum_mid(Tape& tape, const Value& a);

// Column-wise concatenation of 2-d values sharing the leading dimension.
Value concat_cols(Tape& tape, std::span<const Value> parts);

// Columns [begin, end) of a 2-d value.
Value slice_cols(Tape& tape, const Value& a, std::size_t begin, std::size_t end);

Value reshape(Tape& tape, const Value& a, std::vector<std::size_t> new_shape);

// Weighted feature selection: x (B, n) with selection logits F (m, d, n)
// mapped through the choice function row-wise, then f[s,t,i] =
// sum_j x[s,j] * choice(F[t,i,:])[j]. Output (B, m, d).
Value feature_select(Tape& tape, const Value& x, const Value& logits, const ChoiceKind& kind,
                     const ChoiceEval& eval = {});

// Two-class routing gate c[s,t,i] = gate((f[s,t,i] - b[t,i]) / tau[t,i])
// under the layer's choice kind. tau must be strictly positive.
Value scaled_gate(Tape& tape, const Value& f, const Value& b, const Value& tau,
                  const ChoiceKind& kind, const ChoiceEval& eval = {});

// Outer product of the per-depth gate pairs [c, 1-c]: (B, m, d) ->
// (B, m, 2^d). Leaf index bit i (lowest bit = depth 0) selects the factor:
// bit set -> c[.,.,i], clear -> 1 - c[.,.,i].
Value choice_tensor(Tape& tape, const Value& c);

// Response contraction: C (B, m, 2^d) against R (m, 2^d, l) -> (B, m, l).
Value tree_response(Tape& tape, const Value& choices, const Value& responses);

// Mean softmax cross-entropy of logits (B, K) against integer labels.
Value cross_entropy(Tape& tape, const Value& logits, std::span<const int> labels);

// Mean squared error of predictions (B,) or (B, 1) against targets.
Value mse(Tape& tape, const Value& pred, std::span<const double> targets);

}  // namespace nodetab
