#pragma once

// Differentiable primitives. Every op computes its forward value eagerly
// and, when any input carries gradients, records a vector-Jacobian closure
// on the tape. Heavy inner products go through Eigen maps over the flat
// buffers; everything else is plain loops over row-major data.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "capf/tape.hpp"

namespace capf {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

namespace detail {

// Collapse a shape to [outer, axis, inner] around one axis.
struct AxisSplit {
  std::int64_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_axis(const std::vector<int>& shape, int axis) {
  require(axis >= 0 && axis < static_cast<int>(shape.size()), "axis out of range");
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.axis = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}

inline void axpy(Tensor& dst, const Tensor& src, double a = 1.0) {
  double* d = dst.data();
  const double* s = src.data();
  std::int64_t n = dst.numel();
  for (std::int64_t i = 0; i < n; ++i) d[i] += a * s[i];
}

}  // namespace detail

// --- elementwise -----------------------------------------------------------

inline Value add(Value a, Value b) {
  require(a.val().same_shape(b.val()),
          "add: shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
  Tape& t = *a.tape;
  Tensor out = a.val();
  detail::axpy(out, b.val());
  bool ng = a.needs_grad() || b.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, b](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      if (a.needs_grad()) detail::axpy(t.grad_buffer(a.id), g);
      if (b.needs_grad()) detail::axpy(t.grad_buffer(b.id), g);
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

inline Value sub(Value a, Value b) {
  require(a.val().same_shape(b.val()), "sub: shape mismatch");
  Tape& t = *a.tape;
  Tensor out = a.val();
  detail::axpy(out, b.val(), -1.0);
  bool ng = a.needs_grad() || b.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, b](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      if (a.needs_grad()) detail::axpy(t.grad_buffer(a.id), g);
      if (b.needs_grad()) detail::axpy(t.grad_buffer(b.id), g, -1.0);
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

inline Value mul(Value a, Value b) {
  require(a.val().same_shape(b.val()), "mul: shape mismatch");
  Tape& t = *a.tape;
  Tensor out = a.val();
  {
    double* o = out.data();
    const double* bb = b.val().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) o[i] *= bb[i];
  }
  bool ng = a.needs_grad() || b.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, b](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      std::int64_t n = g.numel();
      if (a.needs_grad()) {
        Tensor& da = t.grad_buffer(a.id);
        const double* bb = b.val().data();
        for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * bb[i];
      }
      if (b.needs_grad()) {
        Tensor& db = t.grad_buffer(b.id);
        const double* aa = a.val().data();
        for (std::int64_t i = 0; i < n; ++i) db[i] += g[i] * aa[i];
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

inline Value scale(Value a, double s) {
  Tape& t = *a.tape;
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, s](Tape& t, int self) {
      detail::axpy(t.grad_buffer(a.id), t.grad_or_zeros(self), s);
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// y[r, :] = a[r, :] + v   (v has the length of the last axis)
inline Value add_rowvec(Value a, Value v) {
  const Tensor& av = a.val();
  const Tensor& vv = v.val();
  require(av.rank() >= 1 && vv.rank() == 1, "add_rowvec: expects vector bias");
  int c = av.dim(av.rank() - 1);
  require(vv.dim(0) == c, "add_rowvec: bias length mismatch");
  Tape& t = *a.tape;
  Tensor out = av;
  std::int64_t rows = av.numel() / c;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * c;
    for (int j = 0; j < c; ++j) o[j] += vv[j];
  }
  bool ng = a.needs_grad() || v.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, v, rows, c](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      if (a.needs_grad()) detail::axpy(t.grad_buffer(a.id), g);
      if (v.needs_grad()) {
        Tensor& dv = t.grad_buffer(v.id);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          for (int j = 0; j < c; ++j) dv[j] += gr[j];
        }
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// y[r, :] = a[r, :] + b[r % Rb, :]  with a: [R x C], b: [Rb x C], R = tile * Rb.
// Covers positional embeddings broadcast across a batch axis.
inline Value add_tiled(Value a, Value b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1) &&
              av.dim(0) % bv.dim(0) == 0,
          "add_tiled: incompatible shapes");
  Tape& t = *a.tape;
  int rb = bv.dim(0), c = av.dim(1);
  Tensor out = av;
  for (int r = 0; r < av.dim(0); ++r) {
    double* o = out.data() + static_cast<std::int64_t>(r) * c;
    const double* bb = bv.data() + static_cast<std::int64_t>(r % rb) * c;
    for (int j = 0; j < c; ++j) o[j] += bb[j];
  }
  bool ng = a.needs_grad() || b.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, b, rb, c](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      if (a.needs_grad()) detail::axpy(t.grad_buffer(a.id), g);
      if (b.needs_grad()) {
        Tensor& db = t.grad_buffer(b.id);
        int rows = g.dim(0);
        for (int r = 0; r < rows; ++r) {
          const double* gr = g.data() + static_cast<std::int64_t>(r) * c;
          double* dr = db.data() + static_cast<std::int64_t>(r % rb) * c;
          for (int j = 0; j < c; ++j) dr[j] += gr[j];
        }
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// y[r, :] = s[r] * a[r, :]  with s a flat vector of per-row weights.
inline Value scale_rows(Value a, Value s) {
  const Tensor& av = a.val();
  const Tensor& sv = s.val();
  require(av.rank() == 2, "scale_rows: matrix expected");
  require(sv.numel() == av.dim(0), "scale_rows: weight count mismatch");
  Tape& t = *a.tape;
  int rows = av.dim(0), c = av.dim(1);
  Tensor out = av;
  for (int r = 0; r < rows; ++r) {
    double* o = out.data() + static_cast<std::int64_t>(r) * c;
    for (int j = 0; j < c; ++j) o[j] *= sv[r];
  }
  bool ng = a.needs_grad() || s.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, s, rows, c](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      if (a.needs_grad()) {
        Tensor& da = t.grad_buffer(a.id);
        const Tensor& sv = s.val();
        for (int r = 0; r < rows; ++r) {
          const double* gr = g.data() + static_cast<std::int64_t>(r) * c;
          double* dr = da.data() + static_cast<std::int64_t>(r) * c;
          for (int j = 0; j < c; ++j) dr[j] += sv[r] * gr[j];
        }
      }
      if (s.needs_grad()) {
        Tensor& ds = t.grad_buffer(s.id);
        const Tensor& av = a.val();
        for (int r = 0; r < rows; ++r) {
          const double* gr = g.data() + static_cast<std::int64_t>(r) * c;
          const double* ar = av.data() + static_cast<std::int64_t>(r) * c;
          double acc = 0.0;
          for (int j = 0; j < c; ++j) acc += gr[j] * ar[j];
          ds[r] += acc;
        }
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// --- linear algebra ----------------------------------------------------------

inline Value matmul(Value a, Value b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  require(av.rank() == 2 && bv.rank() == 2, "matmul: rank-2 operands required");
  require(av.dim(1) == bv.dim(0), "matmul: inner extents disagree, " + av.shape_str() +
                                      " times " + bv.shape_str());
  Tape& t = *a.tape;
  int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  {
    CMatMap A(av.data(), m, k), B(bv.data(), k, n);
    MatMap O(out.data(), m, n);
    O.noalias() = A * B;
  }
  bool ng = a.needs_grad() || b.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, b, m, k, n](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      CMatMap G(g.data(), m, n);
      if (a.needs_grad()) {
        MatMap DA(t.grad_buffer(a.id).data(), m, k);
        CMatMap B(b.val().data(), k, n);
        DA.noalias() += G * B.transpose();
      }
      if (b.needs_grad()) {
        MatMap DB(t.grad_buffer(b.id).data(), k, n);
        CMatMap A(a.val().data(), m, k);
        DB.noalias() += A.transpose() * G;
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// Batched matmul over leading group axis: out[g] = opA(a[g]) * opB(b[g]),
// where op is transpose when the flag is set.
inline Value bmm(Value a, Value b, bool trans_a = false, bool trans_b = false) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0),
          "bmm: [G,m,k] and [G,k,n] required");
  int G = av.dim(0);
  int m = trans_a ? av.dim(2) : av.dim(1);
  int k = trans_a ? av.dim(1) : av.dim(2);
  int kb = trans_b ? bv.dim(2) : bv.dim(1);
  int n = trans_b ? bv.dim(1) : bv.dim(2);
  require(k == kb, "bmm: inner extents disagree");
  Tape& t = *a.tape;
  Tensor out({G, m, n});
  std::int64_t sa = static_cast<std::int64_t>(av.dim(1)) * av.dim(2);
  std::int64_t sb = static_cast<std::int64_t>(bv.dim(1)) * bv.dim(2);
  std::int64_t so = static_cast<std::int64_t>(m) * n;
  for (int g = 0; g < G; ++g) {
    CMatMap A(av.data() + g * sa, av.dim(1), av.dim(2));
    CMatMap B(bv.data() + g * sb, bv.dim(1), bv.dim(2));
    MatMap O(out.data() + g * so, m, n);
    if (!trans_a && !trans_b)
      O.noalias() = A * B;
    else if (!trans_a && trans_b)
      O.noalias() = A * B.transpose();
    else if (trans_a && !trans_b)
      O.noalias() = A.transpose() * B;
    else
      O.noalias() = A.transpose() * B.transpose();
  }
  bool ng = a.needs_grad() || b.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, b, trans_a, trans_b, G, m, n, sa, sb, so](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      const Tensor& av = a.val();
      const Tensor& bv = b.val();
      for (int gi = 0; gi < G; ++gi) {
        CMatMap GM(g.data() + gi * so, m, n);
        CMatMap A(av.data() + gi * sa, av.dim(1), av.dim(2));
        CMatMap B(bv.data() + gi * sb, bv.dim(1), bv.dim(2));
        if (a.needs_grad()) {
          MatMap DA(t.grad_buffer(a.id).data() + gi * sa, av.dim(1), av.dim(2));
          if (!trans_a && !trans_b)
            DA.noalias() += GM * B.transpose();
          else if (!trans_a && trans_b)
            DA.noalias() += GM * B;
          else if (trans_a && !trans_b)
            DA.noalias() += B * GM.transpose();
          else
            DA.noalias() += B.transpose() * GM.transpose();
        }
        if (b.needs_grad()) {
          MatMap DB(t.grad_buffer(b.id).data() + gi * sb, bv.dim(1), bv.dim(2));
          if (!trans_a && !trans_b)
            DB.noalias() += A.transpose() * GM;
          else if (!trans_a && trans_b)
            DB.noalias() += GM.transpose() * A;
          else if (trans_a && !trans_b)
            DB.noalias() += A * GM;
          else
            DB.noalias() += GM.transpose() * A.transpose();
        }
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// --- shape plumbing ----------------------------------------------------------

inline Value reshape(Value a, std::vector<int> shape) {
  require(Tensor::count(shape) == a.val().numel(), "reshape: element count mismatch");
  Tape& t = *a.tape;
  Tensor out(std::move(shape), a.val().vec());
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a](Tape& t, int self) {
      detail::axpy(t.grad_buffer(a.id), t.grad_or_zeros(self));
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

namespace detail {

inline Tensor permute_tensor(const Tensor& in, const std::vector<int>& perm) {
  int r = in.rank();
  require(static_cast<int>(perm.size()) == r && r <= 4, "transpose: rank <= 4 required");
  std::vector<int> oshape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) oshape[static_cast<std::size_t>(i)] = in.dim(perm[static_cast<std::size_t>(i)]);
  // Pad to rank 4 for a fixed nest.
  int id4[4] = {0, 1, 2, 3};
  int ishape4[4] = {1, 1, 1, 1}, perm4[4];
  for (int i = 0; i < 4; ++i) perm4[i] = id4[i];
  int pad = 4 - r;
  for (int i = 0; i < r; ++i) ishape4[pad + i] = in.dim(i);
  for (int i = 0; i < r; ++i) perm4[pad + i] = pad + perm[static_cast<std::size_t>(i)];
  std::int64_t istr[4];
  istr[3] = 1;
  for (int i = 2; i >= 0; --i) istr[i] = istr[i + 1] * ishape4[i + 1];
  Tensor out(oshape);
  double* o = out.data();
  const double* src = in.data();
  std::int64_t s0 = istr[perm4[0]], s1 = istr[perm4[1]], s2 = istr[perm4[2]],
               s3 = istr[perm4[3]];
  int d0 = ishape4[perm4[0]], d1 = ishape4[perm4[1]], d2 = ishape4[perm4[2]],
      d3 = ishape4[perm4[3]];
  std::int64_t idx = 0;
  for (int i0 = 0; i0 < d0; ++i0)
    for (int i1 = 0; i1 < d1; ++i1)
      for (int i2 = 0; i2 < d2; ++i2) {
        const double* base = src + i0 * s0 + i1 * s1 + i2 * s2;
        for (int i3 = 0; i3 < d3; ++i3) o[idx++] = base[i3 * s3];
      }
  return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

}  // namespace detail

inline Value transpose(Value a, std::vector<int> perm) {
  Tape& t = *a.tape;
  Tensor out = detail::permute_tensor(a.val(), perm);
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, perm](Tape& t, int self) {
      Tensor gt = detail::permute_tensor(t.grad_or_zeros(self), detail::inverse_perm(perm));
      detail::axpy(t.grad_buffer(a.id), gt);
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

inline Value concat(const std::vector<Value>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  Tape& t = *parts[0].tape;
  const Tensor& first = parts[0].val();
  std::vector<int> oshape = first.shape();
  int total = 0;
  for (const Value& p : parts) {
    require(p.val().rank() == first.rank(), "concat: rank mismatch");
    for (int i = 0; i < first.rank(); ++i)
      if (i != axis)
        require(p.val().dim(i) == first.dim(i), "concat: extent mismatch off-axis");
    total += p.val().dim(axis);
  }
  oshape[static_cast<std::size_t>(axis)] = total;
  Tensor out(oshape);
  auto os = detail::split_axis(oshape, axis);
  std::int64_t pos = 0;
  for (const Value& p : parts) {
    auto ps = detail::split_axis(p.val().shape(), axis);
    const double* src = p.val().data();
    for (std::int64_t o = 0; o < os.outer; ++o) {
      double* dst = out.data() + (o * os.axis + pos) * os.inner;
      std::copy(src + o * ps.axis * ps.inner, src + (o + 1) * ps.axis * ps.inner, dst);
    }
    pos += ps.axis;
  }
  bool ng = false;
  for (const Value& p : parts) ng = ng || p.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [parts, axis, os](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      std::int64_t pos = 0;
      for (const Value& p : parts) {
        auto ps = detail::split_axis(p.val().shape(), axis);
        if (p.needs_grad()) {
          Tensor& dp = t.grad_buffer(p.id);
          for (std::int64_t o = 0; o < os.outer; ++o) {
            const double* src = g.data() + (o * os.axis + pos) * os.inner;
            double* dst = dp.data() + o * ps.axis * ps.inner;
            for (std::int64_t i = 0; i < ps.axis * ps.inner; ++i) dst[i] += src[i];
          }
        }
        pos += ps.axis;
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

inline Value slice(Value a, int axis, int start, int len) {
  const Tensor& av = a.val();
  require(axis >= 0 && axis < av.rank(), "slice: bad axis");
  require(start >= 0 && len > 0 && start + len <= av.dim(axis), "slice: bad range");
  Tape& t = *a.tape;
  std::vector<int> oshape = av.shape();
  oshape[static_cast<std::size_t>(axis)] = len;
  auto is = detail::split_axis(av.shape(), axis);
  Tensor out(oshape);
  for (std::int64_t o = 0; o < is.outer; ++o) {
    const double* src = av.data() + (o * is.axis + start) * is.inner;
    std::copy(src, src + len * is.inner, out.data() + o * len * is.inner);
  }
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, is, start, len](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      Tensor& da = t.grad_buffer(a.id);
      for (std::int64_t o = 0; o < is.outer; ++o) {
        const double* src = g.data() + o * len * is.inner;
        double* dst = da.data() + (o * is.axis + start) * is.inner;
        for (std::int64_t i = 0; i < len * is.inner; ++i) dst[i] += src[i];
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// --- reductions ---------------------------------------------------------------

inline Value sum_all(Value a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (std::int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a](Tape& t, int self) {
      double g = t.grad_or_zeros(self)[0];
      Tensor& da = t.grad_buffer(a.id);
      for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g;
    };
  return Value{&t, t.add(Tensor::scalar(s), ng, std::move(vjp))};
}

inline Value mean_all(Value a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.val().numel())); }

// Sum over one axis (kept for rank-3 token reductions).
inline Value sum_axis(Value a, int axis) {
  const Tensor& av = a.val();
  auto s = detail::split_axis(av.shape(), axis);
  std::vector<int> oshape;
  for (int i = 0; i < av.rank(); ++i)
    if (i != axis) oshape.push_back(av.dim(i));
  if (oshape.empty()) oshape.push_back(1);
  Tape& t = *a.tape;
  Tensor out(oshape);
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t k = 0; k < s.axis; ++k) {
      const double* src = av.data() + (o * s.axis + k) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, s](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      Tensor& da = t.grad_buffer(a.id);
      for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t k = 0; k < s.axis; ++k) {
          double* dst = da.data() + (o * s.axis + k) * s.inner;
          const double* src = g.data() + o * s.inner;
          for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// --- nonlinearities -----------------------------------------------------------

// Numerically stable softmax along the last axis; rows sum to 1.
inline Value softmax_lastdim(Value a) {
  const Tensor& av = a.val();
  require(av.rank() >= 1, "softmax: rank >= 1");
  int c = av.dim(av.rank() - 1);
  std::int64_t rows = av.numel() / c;
  Tape& t = *a.tape;
  Tensor out = av;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * c;
    double mx = o[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, o[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      o[j] = std::exp(o[j] - mx);
      sum += o[j];
    }
    double inv = 1.0 / sum;
    for (int j = 0; j < c; ++j) o[j] *= inv;
  }
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, rows, c](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      const Tensor& y = t.value(self);
      Tensor& da = t.grad_buffer(a.id);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * c;
        const double* yr = y.data() + r * c;
        double* dr = da.data() + r * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
        for (int j = 0; j < c; ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

inline constexpr double kLayerNormEps = 1e-5;

inline Value layer_norm(Value x, Value gain, Value bias) {
  const Tensor& xv = x.val();
  int c = xv.dim(xv.rank() - 1);
  require(c >= 2, "layer_norm: last axis must have extent >= 2");
  require(gain.val().numel() == c && bias.val().numel() == c,
          "layer_norm: gain/bias length mismatch");
  std::int64_t rows = xv.numel() / c;
  Tape& t = *x.tape;
  Tensor out(xv.shape());
  // Cache per-row normalization for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(xv.numel()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  const double* gv = gain.val().data();
  const double* bv = bias.val().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xr[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= c;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[static_cast<std::size_t>(r)] = inv;
    double* o = out.data() + r * c;
    double* xh = xhat->data() + r * c;
    for (int j = 0; j < c; ++j) {
      xh[j] = (xr[j] - mean) * inv;
      o[j] = gv[j] * xh[j] + bv[j];
    }
  }
  bool ng = x.needs_grad() || gain.needs_grad() || bias.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [x, gain, bias, rows, c, xhat, inv_std](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      const double* gv = gain.val().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * c;
        const double* xh = xhat->data() + r * c;
        if (gain.needs_grad()) {
          Tensor& dg = t.grad_buffer(gain.id);
          for (int j = 0; j < c; ++j) dg[j] += gr[j] * xh[j];
        }
        if (bias.needs_grad()) {
          Tensor& db = t.grad_buffer(bias.id);
          for (int j = 0; j < c; ++j) db[j] += gr[j];
        }
        if (x.needs_grad()) {
          Tensor& dx = t.grad_buffer(x.id);
          double* dr = dx.data() + r * c;
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < c; ++j) {
            double dxh = gr[j] * gv[j];
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= c;
          m2 /= c;
          double inv = (*inv_std)[static_cast<std::size_t>(r)];
          for (int j = 0; j < c; ++j) {
            double dxh = gr[j] * gv[j];
            dr[j] += inv * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

inline Value log_op(Value a) {
  Tape& t = *a.tape;
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    require(out[i] > 0.0, "log_op: non-positive input");
    out[i] = std::log(out[i]);
  }
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      Tensor& da = t.grad_buffer(a.id);
      const Tensor& xv = a.val();
      for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g[i] / xv[i];
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// Exact (erf-based) GELU.
inline Value gelu(Value a) {
  Tape& t = *a.tape;
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
  }
  bool ng = a.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      Tensor& da = t.grad_buffer(a.id);
      const Tensor& xv = a.val();
      for (std::int64_t i = 0; i < da.numel(); ++i) {
        double x = xv[i];
        double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
        double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
        da[i] += g[i] * (cdf + x * pdf);
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// --- sampling ------------------------------------------------------------------

namespace detail {

struct BilinearCell {
  int x0, x1, y0, y1;
  double wx, wy;
  bool x_live, y_live;  // false where clamped or degenerate: no coord gradient
};

inline BilinearCell bilinear_cell(double u, double v, int h, int w) {
  BilinearCell cell{};
  double x = (w == 1) ? 0.0 : u * (w - 1);
  double y = (h == 1) ? 0.0 : v * (h - 1);
  cell.x_live = (w > 1) && x > 0.0 && x < w - 1;
  cell.y_live = (h > 1) && y > 0.0 && y < h - 1;
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  cell.x0 = std::min(static_cast<int>(std::floor(x)), std::max(w - 2, 0));
  cell.y0 = std::min(static_cast<int>(std::floor(y)), std::max(h - 2, 0));
  cell.x1 = std::min(cell.x0 + 1, w - 1);
  cell.y1 = std::min(cell.y0 + 1, h - 1);
  cell.wx = x - cell.x0;
  cell.wy = y - cell.y0;
  return cell;
}

}  // namespace detail

// Bilinear interpolation of a [H x W x C] map at a normalized point (u, v).
// u = 0 maps to the center of column 0 and u = 1 to the center of column
// W-1 (align-corners convention); out-of-range points clamp to the border.
// Differentiable in both the map and the point.
inline Value bilinear_sample(Value map, Value point) {
  const Tensor& mv = map.val();
  const Tensor& pv = point.val();
  require(mv.rank() == 3, "bilinear_sample: map must be [H x W x C]");
  require(pv.numel() == 2, "bilinear_sample: point must have 2 coordinates");
  int h = mv.dim(0), w = mv.dim(1), c = mv.dim(2);
  Tape& t = *map.tape;
  auto cell = detail::bilinear_cell(pv[0], pv[1], h, w);
  Tensor out({c});
  const double* m = mv.data();
  auto pix = [&](int y, int x) { return m + (static_cast<std::int64_t>(y) * w + x) * c; };
  const double *p00 = pix(cell.y0, cell.x0), *p01 = pix(cell.y0, cell.x1),
               *p10 = pix(cell.y1, cell.x0), *p11 = pix(cell.y1, cell.x1);
  double w00 = (1 - cell.wx) * (1 - cell.wy), w01 = cell.wx * (1 - cell.wy),
         w10 = (1 - cell.wx) * cell.wy, w11 = cell.wx * cell.wy;
  for (int j = 0; j < c; ++j)
    out[j] = w00 * p00[j] + w01 * p01[j] + w10 * p10[j] + w11 * p11[j];
  bool ng = map.needs_grad() || point.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [map, point, cell, h, w, c](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      double w00 = (1 - cell.wx) * (1 - cell.wy), w01 = cell.wx * (1 - cell.wy),
             w10 = (1 - cell.wx) * cell.wy, w11 = cell.wx * cell.wy;
      if (map.needs_grad()) {
        Tensor& dm = t.grad_buffer(map.id);
        auto at = [&](int y, int x) {
          return dm.data() + (static_cast<std::int64_t>(y) * w + x) * c;
        };
        double *d00 = at(cell.y0, cell.x0), *d01 = at(cell.y0, cell.x1),
               *d10 = at(cell.y1, cell.x0), *d11 = at(cell.y1, cell.x1);
        for (int j = 0; j < c; ++j) {
          d00[j] += w00 * g[j];
          d01[j] += w01 * g[j];
          d10[j] += w10 * g[j];
          d11[j] += w11 * g[j];
        }
      }
      if (point.needs_grad()) {
        const Tensor& mv = map.val();
        const double* m = mv.data();
        auto pix = [&](int y, int x) {
          return m + (static_cast<std::int64_t>(y) * w + x) * c;
        };
        const double *p00 = pix(cell.y0, cell.x0), *p01 = pix(cell.y0, cell.x1),
                     *p10 = pix(cell.y1, cell.x0), *p11 = pix(cell.y1, cell.x1);
        double du = 0.0, dv = 0.0;
        for (int j = 0; j < c; ++j) {
          double dx = (1 - cell.wy) * (p01[j] - p00[j]) + cell.wy * (p11[j] - p10[j]);
          double dy = (1 - cell.wx) * (p10[j] - p00[j]) + cell.wx * (p11[j] - p01[j]);
          du += g[j] * dx;
          dv += g[j] * dy;
        }
        Tensor& dp = t.grad_buffer(point.id);
        if (cell.x_live) dp[0] += du * (w - 1);
        if (cell.y_live) dp[1] += dv * (h - 1);
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

// --- losses ---------------------------------------------------------------------

// Mean over rows of the Euclidean norm of (pred - target); target is a
// plain tensor (no gradient). The norm's subgradient at zero is taken as 0.
inline Value euclidean_row_mean(Value pred, const Tensor& target) {
  const Tensor& pv = pred.val();
  require(pv.rank() == 2 && pv.same_shape(target), "euclidean_row_mean: shape mismatch");
  int rows = pv.dim(0), c = pv.dim(1);
  Tape& t = *pred.tape;
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* pr = pv.data() + static_cast<std::int64_t>(r) * c;
    const double* tr = target.data() + static_cast<std::int64_t>(r) * c;
    for (int j = 0; j < c; ++j) s += (pr[j] - tr[j]) * (pr[j] - tr[j]);
    total += std::sqrt(s);
  }
  total /= rows;
  bool ng = pred.needs_grad();
  Tape::Vjp vjp;
  if (ng) {
    auto tgt = std::make_shared<Tensor>(target);
    vjp = [pred, tgt, rows, c](Tape& t, int self) {
      double g = t.grad_or_zeros(self)[0] / rows;
      const Tensor& pv = pred.val();
      Tensor& dp = t.grad_buffer(pred.id);
      for (int r = 0; r < rows; ++r) {
        const double* pr = pv.data() + static_cast<std::int64_t>(r) * c;
        const double* tr = tgt->data() + static_cast<std::int64_t>(r) * c;
        double* dr = dp.data() + static_cast<std::int64_t>(r) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += (pr[j] - tr[j]) * (pr[j] - tr[j]);
        if (s > 0.0) {
          double inv = g / std::sqrt(s);
          for (int j = 0; j < c; ++j) dr[j] += inv * (pr[j] - tr[j]);
        }
      }
    };
  }
  return Value{&t, t.add(Tensor::scalar(total), ng, std::move(vjp))};
}

// --- compositions -----------------------------------------------------------

inline Value linear(Value x, Value w, Value b) { return add_rowvec(matmul(x, w), b); }

// linear -> GELU -> linear; the caller adds any residual.
inline Value mlp_block(Value x, Value w1, Value b1, Value w2, Value b2) {
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

// Per-channel weighted sum over the frame axis: out[g,d] = sum_f a[g,f,d] w[f,d].
// The temporal gather that reduces F frames to one.
inline Value framewise_reduce(Value a, Value w) {
  const Tensor& av = a.val();
  const Tensor& wv = w.val();
  require(av.rank() == 3 && wv.rank() == 2 && av.dim(1) == wv.dim(0) &&
              av.dim(2) == wv.dim(1),
          "framewise_reduce: [G,F,D] and [F,D] required");
  int G = av.dim(0), F = av.dim(1), D = av.dim(2);
  Tape& t = *a.tape;
  Tensor out({G, D});
  for (int g = 0; g < G; ++g)
    for (int f = 0; f < F; ++f) {
      const double* ar = av.data() + (static_cast<std::int64_t>(g) * F + f) * D;
      const double* wr = wv.data() + static_cast<std::int64_t>(f) * D;
      double* o = out.data() + static_cast<std::int64_t>(g) * D;
      for (int d = 0; d < D; ++d) o[d] += ar[d] * wr[d];
    }
  bool ng = a.needs_grad() || w.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [a, w, G, F, D](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      const Tensor& av = a.val();
      const Tensor& wv = w.val();
      for (int gi = 0; gi < G; ++gi)
        for (int f = 0; f < F; ++f) {
          const double* gr = g.data() + static_cast<std::int64_t>(gi) * D;
          if (a.needs_grad()) {
            double* da = t.grad_buffer(a.id).data() +
                         (static_cast<std::int64_t>(gi) * F + f) * D;
            const double* wr = wv.data() + static_cast<std::int64_t>(f) * D;
            for (int d = 0; d < D; ++d) da[d] += gr[d] * wr[d];
          }
          if (w.needs_grad()) {
            double* dw = t.grad_buffer(w.id).data() + static_cast<std::int64_t>(f) * D;
            const double* ar = av.data() + (static_cast<std::int64_t>(gi) * F + f) * D;
            for (int d = 0; d < D; ++d) dw[d] += gr[d] * ar[d];
          }
        }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

}  // namespace capf
