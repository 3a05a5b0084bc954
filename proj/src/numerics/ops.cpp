#include "dyrate/numerics/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

#include "dyrate/error.hpp"

namespace dyrate::ops {
namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ConfigError(std::string(op) + ": shape mismatch");
  }
}

GradTape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ConfigError("operands live on different tapes");
  return *a.tape;
}

template <typename Fn>
Tensor map_values(const Tensor& x, Fn fn) {
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  GradTape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](GradTape& t, const Tensor& g) {
                       for (Var in : {a, b}) {
                         if (!t.requires_grad(in)) continue;
                         Tensor& gi = t.grad_buffer(in);
                         for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                       }
                     });
}

Var sub(Var a, Var b) {
  GradTape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](GradTape& t, const Tensor& g) {
                       if (t.requires_grad(a)) {
                         Tensor& ga = t.grad_buffer(a);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (t.requires_grad(b)) {
                         Tensor& gb = t.grad_buffer(b);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                       }
                     });
}

Var mul(Var a, Var b) {
  GradTape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](GradTape& t, const Tensor& g) {
                       const Tensor& av = t.value(a);
                       const Tensor& bv = t.value(b);
                       if (t.requires_grad(a)) {
                         Tensor& ga = t.grad_buffer(a);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           ga[i] += g[i] * bv[i];
                       }
                       if (t.requires_grad(b)) {
                         Tensor& gb = t.grad_buffer(b);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gb[i] += g[i] * av[i];
                       }
                     });
}

Var scale(Var a, double s) {
  Tensor out = map_values(a.value(), [s](double x) { return x * s; });
  return a.tape->record(std::move(out), {a}, [a, s](GradTape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = map_values(a.value(), [s](double x) { return x + s; });
  return a.tape->record(std::move(out), {a}, [a](GradTape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_bias(Var x, Var bias) {
  GradTape& tape = tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) throw ConfigError("add_bias: width mismatch");
  Tensor out = xv;
  const std::size_t m = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bv[c];
  return tape.record(std::move(out), {x, bias},
                     [x, bias, m](GradTape& t, const Tensor& g) {
                       if (t.requires_grad(x)) {
                         Tensor& gx = t.grad_buffer(x);
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                       }
                       if (t.requires_grad(bias)) {
                         Tensor& gb = t.grad_buffer(bias);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gb[i % m] += g[i];
                       }
                     });
}

Var matmul(Var a, Var b) {
  GradTape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ConfigError("matmul: inner dimensions differ (" +
                      std::to_string(av.cols()) + " vs " +
                      std::to_string(bv.rows()) + ")");
  }
  Tensor out({av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return tape.record(std::move(out), {a, b},
                     [a, b](GradTape& t, const Tensor& g) {
                       auto gm = as_matrix(g);
                       if (t.requires_grad(a)) {
                         as_matrix(t.grad_buffer(a)).noalias() +=
                             gm * as_matrix(t.value(b)).transpose();
                       }
                       if (t.requires_grad(b)) {
                         as_matrix(t.grad_buffer(b)).noalias() +=
                             as_matrix(t.value(a)).transpose() * gm;
                       }
                     });
}

Var gelu(Var x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Tensor out = map_values(x.value(), [](double v) {
    return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  });
  return x.tape->record(std::move(out), {x}, [x](GradTape& t, const Tensor& g) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var log(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return std::log(v); });
  return x.tape->record(std::move(out), {x}, [x](GradTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

Var exp(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return std::exp(v); });
  const std::uint32_t out_id = static_cast<std::uint32_t>(x.tape->size());
  return x.tape->record(std::move(out), {x},
                        [x, out_id](GradTape& t, const Tensor& g) {
                          const Tensor& yv = t.value(Var{&t, out_id});
                          Tensor& gx = t.grad_buffer(x);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            gx[i] += g[i] * yv[i];
                        });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  GradTape& tape = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  if (gv.size() != d || bv.size() != d) {
    throw ConfigError("layer_norm: gain/bias width mismatch");
  }
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * inv;
      xhat->at(r, c) = h;
      out.at(r, c) = h * gv[c] + bv[c];
    }
  }
  return tape.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, n, d](GradTape& t, const Tensor& g) {
        const Tensor& gv = t.value(gain);
        if (t.requires_grad(gain)) {
          Tensor& gg = t.grad_buffer(gain);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * (*xhat)[i];
        }
        if (t.requires_grad(bias)) {
          Tensor& gb = t.grad_buffer(bias);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
        }
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad_buffer(x);
        std::vector<double> gh(d);
        for (std::size_t r = 0; r < n; ++r) {
          double mean_gh = 0.0;
          double mean_ghx = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            gh[c] = g.at(r, c) * gv[c];
            mean_gh += gh[c];
            mean_ghx += gh[c] * xhat->at(r, c);
          }
          mean_gh /= static_cast<double>(d);
          mean_ghx /= static_cast<double>(d);
          const double inv = (*inv_std)[r];
          for (std::size_t c = 0; c < d; ++c) {
            gx.at(r, c) += inv * (gh[c] - mean_gh - xhat->at(r, c) * mean_ghx);
          }
        }
      });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw ConfigError("embedding: id " + std::to_string(ids[i]) +
                        " outside table of " + std::to_string(tv.rows()));
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->record(
      std::move(out), {table},
      [table, idv = std::move(idv), d](GradTape& t, const Tensor& g) {
        Tensor& gt = t.grad_buffer(table);
        for (std::size_t i = 0; i < idv.size(); ++i) {
          const std::size_t r = static_cast<std::size_t>(idv[i]);
          for (std::size_t c = 0; c < d; ++c) gt.at(r, c) += g.at(i, c);
        }
      });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  const auto& shape = xv.shape();
  if (axis >= shape.size()) throw ConfigError("softmax: axis out of range");
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = kNegInf;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      if (mx == kNegInf) throw NumericError("fully masked softmax slice");
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = xv[base + j * inner];
        const double e = v == kNegInf ? 0.0 : std::exp(v - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  const std::uint32_t out_id = static_cast<std::uint32_t>(x.tape->size());
  return x.tape->record(
      std::move(out), {x},
      [x, out_id, outer, inner, n](GradTape& t, const Tensor& g) {
        const Tensor& y = t.value(Var{&t, out_id});
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double c = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              c += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t k = base + j * inner;
              gx[k] += y[k] * (g[k] - c);
            }
          }
        }
      });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [x](GradTape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ConfigError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var dot(Var a, Var b) {
  GradTape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.size() != bv.size()) throw ConfigError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return tape.record(Tensor::scalar(s), {a, b}, [a, b](GradTape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * av[i];
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows();
  const std::size_t vocab = lv.cols();
  if (targets.size() != n) throw ConfigError("cross_entropy: target count mismatch");
  auto probs = std::make_shared<Tensor>(lv.shape());
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double e = std::exp(row[c] - mx);
      probs->at(r, c) = e;
      z += e;
    }
    for (std::size_t c = 0; c < vocab; ++c) probs->at(r, c) /= z;
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= vocab) {
      throw ConfigError("cross_entropy: target outside vocabulary");
    }
    total += std::log(z) + mx - row[static_cast<std::size_t>(targets[r])];
    ++counted;
  }
  if (counted == 0) throw ConfigError("cross_entropy: no targets");
  std::vector<int> tv(targets.begin(), targets.end());
  const double inv = 1.0 / static_cast<double>(counted);
  return logits.tape->record(
      Tensor::scalar(total * inv), {logits},
      [logits, probs, tv = std::move(tv), inv, vocab](GradTape& t, const Tensor& g) {
        Tensor& gl = t.grad_buffer(logits);
        for (std::size_t r = 0; r < tv.size(); ++r) {
          if (tv[r] < 0) continue;
          for (std::size_t c = 0; c < vocab; ++c) {
            gl.at(r, c) += g[0] * inv * probs->at(r, c);
          }
          gl.at(r, static_cast<std::size_t>(tv[r])) -= g[0] * inv;
        }
      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (begin > end || end > xv.rows()) throw ConfigError("slice_rows: bad range");
  const std::size_t d = xv.cols();
  std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                           xv.data().begin() + static_cast<std::ptrdiff_t>(end * d));
  Tensor out({end - begin, d}, std::move(data));
  return x.tape->record(std::move(out), {x},
                        [x, begin, d](GradTape& t, const Tensor& g) {
                          Tensor& gx = t.grad_buffer(x);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            gx[begin * d + i] += g[i];
                        });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != d) throw ConfigError("concat_rows: width mismatch");
    if (p.tape != parts.front().tape) throw ConfigError("concat_rows: mixed tapes");
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * d);
  for (const Var& p : parts) {
    auto v = p.value().data();
    data.insert(data.end(), v.begin(), v.end());
  }
  return parts.front().tape->record(
      Tensor({rows, d}, std::move(data)), parts,
      [parts](GradTape& t, const Tensor& g) {
        std::size_t offset = 0;
        for (const Var& p : parts) {
          const std::size_t n = t.value(p).size();
          if (t.requires_grad(p)) {
            Tensor& gp = t.grad_buffer(p);
            for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
          }
          offset += n;
        }
      });
}

Var reshape(Var x, std::vector<std::size_t> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](GradTape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var straight_through(const Tensor& hard, Var soft) {
  require_same_shape(hard, soft.value(), "straight_through");
  return soft.tape->record(hard, {soft}, [soft](GradTape& t, const Tensor& g) {
    Tensor& gs = t.grad_buffer(soft);
    for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
}

AttentionResult attention(Var q, Var k, Var v, Var mask, std::size_t heads,
                          std::size_t batch) {
  GradTape& tape = *q.tape;
  if (k.tape != q.tape || v.tape != q.tape || mask.tape != q.tape) {
    throw ConfigError("attention: operands live on different tapes");
  }
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const Tensor& mv = mask.value();
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width mismatch");
  }
  if (batch == 0 || qv.rows() % batch != 0 || kv.rows() % batch != 0 ||
      vv.rows() != kv.rows()) {
    throw ConfigError("attention: row counts do not split into the batch");
  }
  const std::size_t nq = qv.rows() / batch;
  const std::size_t nk = kv.rows() / batch;
  const bool shared_mask = mv.rows() == nq;
  if (mv.cols() != nk || (!shared_mask && mv.rows() != batch * nq)) {
    throw ConfigError("attention: mask is " + std::to_string(mv.rows()) + "x" +
                      std::to_string(mv.cols()) + ", expected " +
                      std::to_string(nq) + "x" + std::to_string(nk));
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool mask_grad = tape.requires_grad(mask);

  Tensor weights({batch, heads, nq, nk});
  // exp(s - max) / Z for every key, which the mask gradient needs.
  auto unmasked_share =
      mask_grad ? std::make_shared<Tensor>(weights.shape()) : nullptr;
  Tensor out({batch * nq, d});
  std::vector<double> scores(nk);

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < nq; ++i) {
        const double* mrow = &mv.data()[(shared_mask ? i : b * nq + i) * nk];
        const double* qi = &qv.data()[(b * nq + i) * d + h * dh];
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < nk; ++j) {
          if (mrow[j] <= 0.0 && !mask_grad) continue;
          const double* kj = &kv.data()[(b * nk + j) * d + h * dh];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt;
          scores[j] = s;
          if (mrow[j] > 0.0) {
            any = true;
            mx = std::max(mx, s);
          }
        }
        if (!any) throw NumericError("query fully masked");
        double z = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          if (mrow[j] <= 0.0) continue;
          z += mrow[j] * std::exp(scores[j] - mx);
        }
        double* wrow = &weights.data()[((b * heads + h) * nq + i) * nk];
        double* orow = &out.data()[(b * nq + i) * d + h * dh];
        for (std::size_t j = 0; j < nk; ++j) {
          if (mrow[j] <= 0.0) continue;
          const double a = mrow[j] * std::exp(scores[j] - mx) / z;
          wrow[j] = a;
          const double* vj = &vv.data()[(b * nk + j) * d + h * dh];
          for (std::size_t c = 0; c < dh; ++c) orow[c] += a * vj[c];
        }
        if (mask_grad) {
          double* urow = &unmasked_share->data()[((b * heads + h) * nq + i) * nk];
          for (std::size_t j = 0; j < nk; ++j) {
            urow[j] = std::exp(std::min(scores[j] - mx, 700.0)) / z;
          }
        }
      }
    }
  }

  auto saved = std::make_shared<Tensor>(weights);
  Var out_var = tape.record(
      std::move(out), {q, k, v, mask},
      [q, k, v, mask, saved, unmasked_share, heads, batch, nq, nk, d, dh, inv_sqrt,
       shared_mask](GradTape& t, const Tensor& g) {
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        const Tensor& mv = t.value(mask);
        Tensor* gq = t.requires_grad(q) ? &t.grad_buffer(q) : nullptr;
        Tensor* gk = t.requires_grad(k) ? &t.grad_buffer(k) : nullptr;
        Tensor* gv = t.requires_grad(v) ? &t.grad_buffer(v) : nullptr;
        Tensor* gm = t.requires_grad(mask) ? &t.grad_buffer(mask) : nullptr;
        std::vector<double> ga(nk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < nq; ++i) {
              const std::size_t mrow_index = shared_mask ? i : b * nq + i;
              const double* mrow = &mv.data()[mrow_index * nk];
              const double* wrow = &saved->data()[((b * heads + h) * nq + i) * nk];
              const double* go = &g.data()[(b * nq + i) * d + h * dh];
              double c = 0.0;
              for (std::size_t j = 0; j < nk; ++j) {
                if (mrow[j] <= 0.0 && gm == nullptr) continue;
                const double* vj = &vv.data()[(b * nk + j) * d + h * dh];
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += go[e] * vj[e];
                ga[j] = s;
                if (mrow[j] > 0.0) c += wrow[j] * s;
              }
              const double* qi = &qv.data()[(b * nq + i) * d + h * dh];
              for (std::size_t j = 0; j < nk; ++j) {
                if (mrow[j] <= 0.0) continue;
                const double a = wrow[j];
                const double gs = a * (ga[j] - c) * inv_sqrt;
                const double* kj = &kv.data()[(b * nk + j) * d + h * dh];
                if (gq) {
                  double* gqi = &gq->data()[(b * nq + i) * d + h * dh];
                  for (std::size_t e = 0; e < dh; ++e) gqi[e] += gs * kj[e];
                }
                if (gk) {
                  double* gkj = &gk->data()[(b * nk + j) * d + h * dh];
                  for (std::size_t e = 0; e < dh; ++e) gkj[e] += gs * qi[e];
                }
                if (gv) {
                  double* gvj = &gv->data()[(b * nk + j) * d + h * dh];
                  for (std::size_t e = 0; e < dh; ++e) gvj[e] += a * go[e];
                }
              }
              if (gm) {
                const double* urow =
                    &unmasked_share->data()[((b * heads + h) * nq + i) * nk];
                double* gmrow = &gm->data()[mrow_index * nk];
                for (std::size_t j = 0; j < nk; ++j) gmrow[j] += urow[j] * (ga[j] - c);
              }
            }
          }
        }
      });
  return AttentionResult{out_var, std::move(weights)};
}

}  // namespace dyrate::ops
