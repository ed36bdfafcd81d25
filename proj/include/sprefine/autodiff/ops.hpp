#ifndef SPREFINE_AUTODIFF_OPS_HPP
#define SPREFINE_AUTODIFF_OPS_HPP

// Generic primitives for the tape. Binary elementwise ops broadcast a size-1
// operand against the other. Selection ops (max, min, clamp) route the
// gradient to the selected branch, first index on ties.

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "sprefine/autodiff/tape.hpp"
#include "sprefine/geometry.hpp"

namespace sprefine::ad {

namespace detail {

inline std::size_t broadcast_size(Var a, Var b) {
  const auto na = a.size(), nb = b.size();
  if (na == nb || nb == 1) return na;
  if (na == 1) return nb;
  throw InvalidInput("elementwise op: incompatible sizes");
}

inline double at(std::span<const double> v, std::size_t i) { return v.size() == 1 ? v[0] : v[i]; }

inline void add_at(std::span<double> g, std::size_t i, double x) {
  if (g.empty()) return;
  if (g.size() == 1)
    g[0] += x;
  else
    g[i] += x;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  const auto n = detail::broadcast_size(a, b);
  const auto va = a.value(), vb = b.value();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = detail::at(va, i) + detail::at(vb, i);
  return a.tape->record(std::move(out), {a, b}, [a, b, n](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    auto gb = t.accumulator(b);
    for (std::size_t i = 0; i < n; ++i) {
      detail::add_at(ga, i, g[i]);
      detail::add_at(gb, i, g[i]);
    }
  });
}

inline Var sub(Var a, Var b) {
  const auto n = detail::broadcast_size(a, b);
  const auto va = a.value(), vb = b.value();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = detail::at(va, i) - detail::at(vb, i);
  return a.tape->record(std::move(out), {a, b}, [a, b, n](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    auto gb = t.accumulator(b);
    for (std::size_t i = 0; i < n; ++i) {
      detail::add_at(ga, i, g[i]);
      detail::add_at(gb, i, -g[i]);
    }
  });
}

inline Var mul(Var a, Var b) {
  const auto n = detail::broadcast_size(a, b);
  const auto va = a.value(), vb = b.value();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = detail::at(va, i) * detail::at(vb, i);
  return a.tape->record(std::move(out), {a, b}, [a, b, n](Tape& t, std::span<const double> g) {
    const auto va = t.value(a), vb = t.value(b);
    auto ga = t.accumulator(a);
    auto gb = t.accumulator(b);
    for (std::size_t i = 0; i < n; ++i) {
      detail::add_at(ga, i, g[i] * detail::at(vb, i));
      detail::add_at(gb, i, g[i] * detail::at(va, i));
    }
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// scale * a + offset, elementwise.
inline Var affine(Var a, double scale, double offset = 0.0) {
  const auto va = a.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = scale * va[i] + offset;
  return a.tape->record(std::move(out), {a}, [a, scale](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
}

template <typename F, typename D>
Var unary(Var a, F f, D df) {
  const auto va = a.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = f(va[i]);
  return a.tape->record(std::move(out), {a}, [a, df](Tape& t, std::span<const double> g) {
    const auto va = t.value(a);
    auto ga = t.accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(va[i]);
  });
}

inline Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

/// sqrt with a zero subgradient at 0.
inline Var sqrt(Var a) {
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double logit(double p) { return std::log(p) - std::log1p(-p); }
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

inline Var sigmoid(Var a) {
  return unary(a, [](double x) { return sigmoid(x); },
               [](double x) {
                 const double s = sigmoid(x);
                 return s * (1.0 - s);
               });
}

inline Var softplus(Var a) {
  return unary(a, [](double x) { return softplus(x); }, [](double x) { return sigmoid(x); });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  return a.tape->record({s}, {a}, [a](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    for (auto& x : ga) x += g[0];
  });
}

inline Var mean(Var a) {
  const auto n = static_cast<double>(a.size());
  double s = 0.0;
  for (double x : a.value()) s += x;
  return a.tape->record({s / n}, {a}, [a, n](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    for (auto& x : ga) x += g[0] / n;
  });
}

/// y = M a for a constant matrix M.
inline Var linear(std::shared_ptr<const Matrix> m, Var a) {
  if (static_cast<std::size_t>(m->cols) != a.size()) throw InvalidInput("linear: size mismatch");
  const auto va = a.value();
  std::vector<double> out(static_cast<std::size_t>(m->rows), 0.0);
  for (int i = 0; i < m->rows; ++i) {
    const double* row = &m->data[static_cast<std::size_t>(i) * m->cols];
    double s = 0.0;
    for (int k = 0; k < m->cols; ++k) s += row[k] * va[k];
    out[i] = s;
  }
  return a.tape->record(std::move(out), {a}, [a, m](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    for (int i = 0; i < m->rows; ++i) {
      const double* row = &m->data[static_cast<std::size_t>(i) * m->cols];
      for (int k = 0; k < m->cols; ++k) ga[k] += row[k] * g[i];
    }
  });
}

/// Forward differences a[i+1] - a[i].
inline Var diff(Var a) {
  const auto va = a.value();
  if (va.size() < 2) throw InvalidInput("diff: need at least 2 entries");
  std::vector<double> out(va.size() - 1);
  for (std::size_t i = 0; i + 1 < va.size(); ++i) out[i] = va[i + 1] - va[i];
  return a.tape->record(std::move(out), {a}, [a](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i + 1] += g[i];
      ga[i] -= g[i];
    }
  });
}

/// Elementwise max over equally sized inputs; the gradient of each entry goes
/// to the first input attaining the max.
inline Var elementwise_max(const std::vector<Var>& in) {
  if (in.empty()) throw InvalidInput("elementwise_max: empty input");
  const auto n = in.front().size();
  for (const auto& v : in)
    if (v.size() != n) throw InvalidInput("elementwise_max: size mismatch");
  std::vector<double> out(in.front().value().begin(), in.front().value().end());
  std::vector<std::uint32_t> arg(n, 0);
  for (std::size_t k = 1; k < in.size(); ++k) {
    const auto v = in[k].value();
    for (std::size_t i = 0; i < n; ++i)
      if (v[i] > out[i]) {
        out[i] = v[i];
        arg[i] = static_cast<std::uint32_t>(k);
      }
  }
  return in.front().tape->record(std::move(out), std::span<const Var>(in),
                                 [in, arg = std::move(arg)](Tape& t, std::span<const double> g) {
                                   std::vector<std::span<double>> gs;
                                   for (const auto& v : in) gs.push_back(t.accumulator(v));
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                     auto& gi = gs[arg[i]];
                                     if (!gi.empty()) gi[i] += g[i];
                                   }
                                 });
}

/// Sum of equally sized inputs, accumulated in input order.
inline Var add_n(const std::vector<Var>& in) {
  if (in.empty()) throw InvalidInput("add_n: empty input");
  const auto n = in.front().size();
  std::vector<double> out(in.front().value().begin(), in.front().value().end());
  for (std::size_t k = 1; k < in.size(); ++k) {
    const auto v = in[k].value();
    if (v.size() != n) throw InvalidInput("add_n: size mismatch");
    for (std::size_t i = 0; i < n; ++i) out[i] += v[i];
  }
  return in.front().tape->record(std::move(out), std::span<const Var>(in),
                                 [in](Tape& t, std::span<const double> g) {
                                   for (const auto& v : in) {
                                     auto gv = t.accumulator(v);
                                     for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
                                   }
                                 });
}

/// Smallest entry as a scalar; gradient to the first argmin.
inline Var min_element(Var a) {
  const auto va = a.value();
  if (va.empty()) throw InvalidInput("min_element: empty input");
  const auto it = std::min_element(va.begin(), va.end());
  const auto idx = static_cast<std::size_t>(it - va.begin());
  return a.tape->record({*it}, {a}, [a, idx](Tape& t, std::span<const double> g) {
    auto ga = t.accumulator(a);
    ga[idx] += g[0];
  });
}

/// max(a, floor) elementwise; zero gradient where the floor is active.
inline Var clamp_min(Var a, double floor) {
  return unary(a, [floor](double x) { return x > floor ? x : floor; },
               [floor](double x) { return x > floor ? 1.0 : 0.0; });
}

}  // namespace sprefine::ad

#endif
