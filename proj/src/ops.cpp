#include "nodetab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace nodetab {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Value add(Tape& tape, const Value& a, const Value& b) {
  require(a.tensor().same_shape(b.tensor()), "add: shape mismatch");
  Tensor out = a.tensor();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.tensor()[i];
  return tape.record("add", std::move(out), {a, b}, [](Node& self) {
    const Tensor& g = self.grad;
    Tensor& ga = self.parents[0]->ensure_grad();
    Tensor& gb = self.parents[1]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

Value sub(Tape& tape, const Value& a, const Value& b) {
  require(a.tensor().same_shape(b.tensor()), "sub: shape mismatch");
  Tensor out = a.tensor();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.tensor()[i];
  return tape.record("sub", std::move(out), {a, b}, [](Node& self) {
    const Tensor& g = self.grad;
    Tensor& ga = self.parents[0]->ensure_grad();
    Tensor& gb = self.parents[1]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

Value mul(Tape& tape, const Value& a, const Value& b) {
  require(a.tensor().same_shape(b.tensor()), "mul: shape mismatch");
  Tensor out = a.tensor();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.tensor()[i];
  return tape.record("mul", std::move(out), {a, b}, [](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    Tensor& ga = self.parents[0]->ensure_grad();
    Tensor& gb = self.parents[1]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv[i];
      gb[i] += g[i] * av[i];
    }
  });
}

Value scale(Tape& tape, const Value& a, double k) {
  Tensor out = a.tensor();
  for (double& v : out.flat()) v *= k;
  return tape.record("scale", std::move(out), {a}, [k](Node& self) {
    Tensor& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += k * self.grad[i];
  });
}

Value add_const(Tape& tape, const Value& a, double k) {
  Tensor out = a.tensor();
  for (double& v : out.flat()) v += k;
  return tape.record("add_const", std::move(out), {a}, [](Node& self) {
    Tensor& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Value abs_val(Tape& tape, const Value& a) {
  Tensor out = a.tensor();
  for (double& v : out.flat()) v = std::abs(v);
  return tape.record("abs", std::move(out), {a}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    Tensor& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double s = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
      ga[i] += self.grad[i] * s;
    }
  });
}

Value softplus(Tape& tape, const Value& a) {
  Tensor out = a.tensor();
  for (double& v : out.flat()) v = std::log1p(std::exp(-std::abs(v))) + std::max(v, 0.0);
  return tape.record("softplus", std::move(out), {a}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    Tensor& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i] * logistic(av[i]);
    }
  });
}

Value sum(Tape& tape, const Value& a) {
  double s = 0.0;
  for (double v : a.tensor().flat()) s += v;
  return tape.record("sum", Tensor::scalar(s), {a}, [](Node& self) {
    Tensor& ga = self.parents[0]->ensure_grad();
    double g = self.grad[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Value mean(Tape& tape, const Value& a) {
  require(a.tensor().size() > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : a.tensor().flat()) s += v;
  double n = static_cast<double>(a.tensor().size());
  return tape.record("mean", Tensor::scalar(s / n), {a}, [n](Node& self) {
    Tensor& ga = self.parents[0]->ensure_grad();
    double g = self.grad[0] / n;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Value sum_mid(Tape& tape, const Value& a) {
  require(a.tensor().rank() == 3, "sum_mid: expected rank-3 input");
  const Tensor& t = a.tensor();
  std::size_t B = t.dim(0), M = t.dim(1), L = t.dim(2);
  Tensor out({B, L});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t l = 0; l < L; ++l) out.at(s, l) += t.at(s, m, l);
    }
  }
  return tape.record("sum_mid", std::move(out), {a}, [B, M, L](Node& self) {
    Tensor& ga = self.parents[0]->ensure_grad();
    const Tensor& g = self.grad;
    for (std::size_t s = 0; s < B; ++s) {
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t l = 0; l < L; ++l) ga.at(s, m, l) += g.at(s, l);
      }
    }
  });
}

Value concat_cols(Tape& tape, std::span<const Value> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  std::size_t B = parts[0].tensor().dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Value& p : parts) {
    require(p.tensor().rank() == 2, "concat_cols: expected rank-2 inputs");
    require(p.tensor().dim(0) == B, "concat_cols: leading dimension mismatch");
    widths.push_back(p.tensor().dim(1));
    total += widths.back();
  }
  Tensor out({B, total});
  std::size_t offset = 0;
  for (const Value& p : parts) {
    const Tensor& t = p.tensor();
    std::size_t w = t.dim(1);
    for (std::size_t s = 0; s < B; ++s) {
      std::copy_n(t.data() + s * w, w, out.data() + s * total + offset);
    }
    offset += w;
  }
  std::vector<Value> parents(parts.begin(), parts.end());
  return tape.record("concat_cols", std::move(out), std::move(parents),
                     [B, total, widths](Node& self) {
                       const Tensor& g = self.grad;
                       std::size_t offset = 0;
                       for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                         Tensor& gp = self.parents[pi]->ensure_grad();
                         std::size_t w = widths[pi];
                         for (std::size_t s = 0; s < B; ++s) {
                           const double* src = g.data() + s * total + offset;
                           double* dst = gp.data() + s * w;
                           for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                         }
                         offset += w;
                       }
                     });
}

Value slice_cols(Tape& tape, const Value& a, std::size_t begin, std::size_t end) {
  require(a.tensor().rank() == 2, "slice_cols: expected rank-2 input");
  std::size_t B = a.tensor().dim(0), W = a.tensor().dim(1);
  require(begin < end && end <= W, "slice_cols: bad column range");
  std::size_t w = end - begin;
  Tensor out({B, w});
  for (std::size_t s = 0; s < B; ++s) {
    std::copy_n(a.tensor().data() + s * W + begin, w, out.data() + s * w);
  }
  return tape.record("slice_cols", std::move(out), {a}, [B, W, begin, w](Node& self) {
    Tensor& ga = self.parents[0]->ensure_grad();
    const Tensor& g = self.grad;
    for (std::size_t s = 0; s < B; ++s) {
      const double* src = g.data() + s * w;
      double* dst = ga.data() + s * W + begin;
      for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
    }
  });
}

Value reshape(Tape& tape, const Value& a, std::vector<std::size_t> new_shape) {
  Tensor out = a.tensor().reshaped(std::move(new_shape));
  return tape.record("reshape", std::move(out), {a}, [](Node& self) {
    Tensor& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Value feature_select(Tape& tape, const Value& x, const Value& logits, const ChoiceKind& kind,
                     const ChoiceEval& eval) {
  const Tensor& xt = x.tensor();
  const Tensor& ft = logits.tensor();
  require(xt.rank() == 2, "feature_select: x must be (batch, features)");
  require(ft.rank() == 3, "feature_select: logits must be (trees, depth, features)");
  require(ft.dim(2) == xt.dim(1), "feature_select: feature dimension mismatch");
  std::size_t B = xt.dim(0), M = ft.dim(0), D = ft.dim(1), N = ft.dim(2);

  Tensor weights({M, D, N});
  for (std::size_t t = 0; t < M; ++t) {
    for (std::size_t i = 0; i < D; ++i) {
      std::span<const double> row(ft.data() + (t * D + i) * N, N);
      std::vector<double> p = choice_forward(kind, row, eval);
      std::copy(p.begin(), p.end(), weights.data() + (t * D + i) * N);
    }
  }

  Tensor out({B, M, D});
  for (std::size_t t = 0; t < M; ++t) {
    for (std::size_t i = 0; i < D; ++i) {
      const double* wrow = weights.data() + (t * D + i) * N;
      for (std::size_t s = 0; s < B; ++s) {
        const double* xrow = xt.data() + s * N;
        double acc = 0.0;
        for (std::size_t j = 0; j < N; ++j) acc += xrow[j] * wrow[j];
        out.at(s, t, i) = acc;
      }
    }
  }

  double temperature = eval.temperature;
  return tape.record(
      "feature_select", std::move(out), {x, logits},
      [B, M, D, N, kind, temperature, weights = std::move(weights)](Node& self) {
        const Tensor& g = self.grad;
        const Tensor& xv = self.parents[0]->value;
        Tensor& gx = self.parents[0]->ensure_grad();
        Tensor& gf = self.parents[1]->ensure_grad();
        std::vector<double> dw(N);
        for (std::size_t t = 0; t < M; ++t) {
          for (std::size_t i = 0; i < D; ++i) {
            const double* wrow = weights.data() + (t * D + i) * N;
            std::fill(dw.begin(), dw.end(), 0.0);
            for (std::size_t s = 0; s < B; ++s) {
              double gi = g.at(s, t, i);
              if (gi == 0.0) continue;
              const double* xrow = xv.data() + s * N;
              double* gxrow = gx.data() + s * N;
              for (std::size_t j = 0; j < N; ++j) {
                dw[j] += gi * xrow[j];
                gxrow[j] += gi * wrow[j];
              }
            }
            std::span<const double> wspan(wrow, N);
            std::vector<double> df = choice_backward(kind, wspan, dw, temperature);
            double* gfrow = gf.data() + (t * D + i) * N;
            for (std::size_t j = 0; j < N; ++j) gfrow[j] += df[j];
          }
        }
      });
}

Value scaled_gate(Tape& tape, const Value& f, const Value& b, const Value& tau,
                  const ChoiceKind& kind, const ChoiceEval& eval) {
  const Tensor& ft = f.tensor();
  const Tensor& bt = b.tensor();
  const Tensor& tt = tau.tensor();
  require(ft.rank() == 3, "scaled_gate: f must be (batch, trees, depth)");
  require(bt.rank() == 2 && tt.rank() == 2, "scaled_gate: b and tau must be (trees, depth)");
  std::size_t B = ft.dim(0), M = ft.dim(1), D = ft.dim(2);
  require(bt.dim(0) == M && bt.dim(1) == D, "scaled_gate: thresholds shape mismatch");
  require(tt.same_shape(bt), "scaled_gate: scales shape mismatch");
  for (double v : tt.flat()) {
    if (!(v > 0.0)) throw std::invalid_argument("scaled_gate: scales must be strictly positive");
  }

  Tensor out({B, M, D});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t t = 0; t < M; ++t) {
      for (std::size_t i = 0; i < D; ++i) {
        double arg = (ft.at(s, t, i) - bt.at(t, i)) / tt.at(t, i);
        out.at(s, t, i) = gate_forward(kind, arg, eval);
      }
    }
  }

  double temperature = eval.temperature;
  return tape.record("scaled_gate", std::move(out), {f, b, tau},
                     [B, M, D, kind, temperature](Node& self) {
                       const Tensor& g = self.grad;
                       const Tensor& c = self.value;
                       const Tensor& fv = self.parents[0]->value;
                       const Tensor& bv = self.parents[1]->value;
                       const Tensor& tv = self.parents[2]->value;
                       Tensor& gf = self.parents[0]->ensure_grad();
                       Tensor& gb = self.parents[1]->ensure_grad();
                       Tensor& gt = self.parents[2]->ensure_grad();
                       for (std::size_t s = 0; s < B; ++s) {
                         for (std::size_t t = 0; t < M; ++t) {
                           for (std::size_t i = 0; i < D; ++i) {
                             double gi = g.at(s, t, i);
                             if (gi == 0.0) continue;
                             double slope = gate_slope(kind, c.at(s, t, i), temperature);
                             if (slope == 0.0) continue;
                             double tau_ti = tv.at(t, i);
                             double arg = (fv.at(s, t, i) - bv.at(t, i)) / tau_ti;
                             double base = gi * slope / tau_ti;
                             gf.at(s, t, i) += base;
                             gb.at(t, i) -= base;
                             gt.at(t, i) -= base * arg;
                           }
                         }
                       }
                     });
}

Value choice_tensor(Tape& tape, const Value& c) {
  const Tensor& ct = c.tensor();
  require(ct.rank() == 3, "choice_tensor: input must be (batch, trees, depth)");
  std::size_t B = ct.dim(0), M = ct.dim(1), D = ct.dim(2);
  require(D >= 1 && D <= 24, "choice_tensor: depth out of range");
  std::size_t P = std::size_t{1} << D;

  Tensor out({B, M, P});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t t = 0; t < M; ++t) {
      double* row = out.data() + (s * M + t) * P;
      row[0] = 1.0;
      std::size_t len = 1;
      for (std::size_t i = 0; i < D; ++i) {
        double ci = ct.at(s, t, i);
        for (std::size_t idx = 0; idx < len; ++idx) {
          double v = row[idx];
          row[idx] = v * (1.0 - ci);
          row[idx | len] = v * ci;
        }
        len <<= 1;
      }
    }
  }

  return tape.record("choice_tensor", std::move(out), {c}, [B, M, D, P](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& cv = self.parents[0]->value;
    Tensor& gc = self.parents[0]->ensure_grad();
    // Product-over-all-but-one via prefix/suffix product tables, rebuilt per
    // (sample, tree); avoids dividing by saturated (zero) factors.
    std::vector<double> prefix(P);      // prefix_i at offset 2^i - 1, length 2^i
    std::vector<double> suffix(2 * P);  // suffix_i at offset 2*(P - 2^(D-i)), length 2^(D-i)
    for (std::size_t s = 0; s < B; ++s) {
      for (std::size_t t = 0; t < M; ++t) {
        const double* grow = g.data() + (s * M + t) * P;
        prefix[0] = 1.0;
        for (std::size_t i = 0; i + 1 < D; ++i) {
          double ci = cv.at(s, t, i);
          std::size_t len = std::size_t{1} << i;
          const double* src = prefix.data() + (len - 1);
          double* dst = prefix.data() + (2 * len - 1);
          for (std::size_t low = 0; low < len; ++low) {
            dst[low] = src[low] * (1.0 - ci);
            dst[low | len] = src[low] * ci;
          }
        }
        suffix[2 * (P - 1)] = 1.0;  // suffix_D
        for (std::size_t i = D - 1; i >= 1; --i) {
          double ci = cv.at(s, t, i);
          std::size_t len = std::size_t{1} << (D - i);  // length of suffix_i
          std::size_t off = 2 * (P - len);
          std::size_t prev_off = 2 * (P - len / 2);
          for (std::size_t high = 0; high < len / 2; ++high) {
            suffix[off + (high << 1)] = (1.0 - ci) * suffix[prev_off + high];
            suffix[off + (high << 1) + 1] = ci * suffix[prev_off + high];
          }
        }
        for (std::size_t i = 0; i < D; ++i) {
          std::size_t low_len = std::size_t{1} << i;
          std::size_t high_len = P >> (i + 1);
          const double* pref = prefix.data() + (low_len - 1);
          std::size_t suff_off = 2 * (P - high_len);
          double acc = 0.0;
          for (std::size_t high = 0; high < high_len; ++high) {
            double sh = suffix[suff_off + high];
            if (sh == 0.0) continue;
            std::size_t base = high << (i + 1);
            double inner = 0.0;
            for (std::size_t low = 0; low < low_len; ++low) {
              inner += pref[low] * (grow[base + low_len + low] - grow[base + low]);
            }
            acc += sh * inner;
          }
          gc.at(s, t, i) += acc;
        }
      }
    }
  });
}

Value tree_response(Tape& tape, const Value& choices, const Value& responses) {
  const Tensor& ct = choices.tensor();
  const Tensor& rt = responses.tensor();
  require(ct.rank() == 3, "tree_response: choices must be (batch, trees, leaves)");
  require(rt.rank() == 3, "tree_response: responses must be (trees, leaves, channels)");
  std::size_t B = ct.dim(0), M = ct.dim(1), P = ct.dim(2), L = rt.dim(2);
  require(rt.dim(0) == M && rt.dim(1) == P, "tree_response: shape mismatch");

  Tensor out({B, M, L});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t t = 0; t < M; ++t) {
      double* orow = out.data() + (s * M + t) * L;
      const double* crow = ct.data() + (s * M + t) * P;
      for (std::size_t idx = 0; idx < P; ++idx) {
        double coef = crow[idx];
        if (coef == 0.0) continue;
        const double* rrow = rt.data() + (t * P + idx) * L;
        for (std::size_t l = 0; l < L; ++l) orow[l] += coef * rrow[l];
      }
    }
  }

  return tape.record("tree_response", std::move(out), {choices, responses},
                     [B, M, P, L](Node& self) {
                       const Tensor& g = self.grad;
                       const Tensor& cv = self.parents[0]->value;
                       const Tensor& rv = self.parents[1]->value;
                       Tensor& gc = self.parents[0]->ensure_grad();
                       Tensor& gr = self.parents[1]->ensure_grad();
                       for (std::size_t s = 0; s < B; ++s) {
                         for (std::size_t t = 0; t < M; ++t) {
                           const double* grow = g.data() + (s * M + t) * L;
                           const double* crow = cv.data() + (s * M + t) * P;
                           double* gcrow = gc.data() + (s * M + t) * P;
                           for (std::size_t idx = 0; idx < P; ++idx) {
                             const double* rrow = rv.data() + (t * P + idx) * L;
                             double* grrow = gr.data() + (t * P + idx) * L;
                             double acc = 0.0;
                             double coef = crow[idx];
                             for (std::size_t l = 0; l < L; ++l) {
                               acc += grow[l] * rrow[l];
                               grrow[l] += coef * grow[l];
                             }
                             gcrow[idx] += acc;
                           }
                         }
                       }
                     });
}

Value cross_entropy(Tape& tape, const Value& logits, std::span<const int> labels) {
  const Tensor& zt = logits.tensor();
  require(zt.rank() == 2, "cross_entropy: logits must be (batch, classes)");
  std::size_t B = zt.dim(0), K = zt.dim(1);
  require(labels.size() == B, "cross_entropy: label count mismatch");
  for (int y : labels) {
    require(y >= 0 && static_cast<std::size_t>(y) < K, "cross_entropy: label out of range");
  }

  Tensor probs({B, K});
  double loss = 0.0;
  for (std::size_t s = 0; s < B; ++s) {
    const double* row = zt.data() + s * K;
    double m = *std::max_element(row, row + K);
    double lse = 0.0;
    for (std::size_t k = 0; k < K; ++k) lse += std::exp(row[k] - m);
    lse = m + std::log(lse);
    for (std::size_t k = 0; k < K; ++k) probs.at(s, k) = std::exp(row[k] - lse);
    loss -= row[static_cast<std::size_t>(labels[s])] - lse;
  }
  loss /= static_cast<double>(B);

  std::vector<int> ys(labels.begin(), labels.end());
  return tape.record("cross_entropy", Tensor::scalar(loss), {logits},
                     [B, K, ys = std::move(ys), probs = std::move(probs)](Node& self) {
                       double g = self.grad[0] / static_cast<double>(B);
                       Tensor& gz = self.parents[0]->ensure_grad();
                       for (std::size_t s = 0; s < B; ++s) {
                         for (std::size_t k = 0; k < K; ++k) {
                           double onehot = static_cast<std::size_t>(ys[s]) == k ? 1.0 : 0.0;
                           gz.at(s, k) += g * (probs.at(s, k) - onehot);
                         }
                       }
                     });
}

Value mse(Tape& tape, const Value& pred, std::span<const double> targets) {
  const Tensor& pt = pred.tensor();
  bool flat_ok = pt.rank() == 1;
  bool col_ok = pt.rank() == 2 && pt.dim(1) == 1;
  require(flat_ok || col_ok, "mse: predictions must be (batch,) or (batch, 1)");
  std::size_t B = pt.dim(0);
  require(targets.size() == B, "mse: target count mismatch");

  double loss = 0.0;
  for (std::size_t s = 0; s < B; ++s) {
    double d = pt[s] - targets[s];
    loss += d * d;
  }
  loss /= static_cast<double>(B);

  std::vector<double> ts(targets.begin(), targets.end());
  return tape.record("mse", Tensor::scalar(loss), {pred},
                     [B, ts = std::move(ts)](Node& self) {
                       double g = 2.0 * self.grad[0] / static_cast<double>(B);
                       const Tensor& pv = self.parents[0]->value;
                       Tensor& gp = self.parents[0]->ensure_grad();
                       for (std::size_t s = 0; s < B; ++s) gp[s] += g * (pv[s] - ts[s]);
                     });
}

}  // namespace nodetab
