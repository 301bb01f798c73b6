#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "crepair/tensor.hpp"

namespace crepair {

namespace detail {

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw NumericError(msg);
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape()) {
    throw NumericError(std::string(op) + ": shape mismatch " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = detail::make_op_output(a.shape(), {a, b}, [](detail::Node& o) {
    for (int p = 0; p < 2; ++p) {
      auto& parent = *o.parents[static_cast<std::size_t>(p)];
      if (!parent.requires_grad) continue;
      for (std::size_t i = 0; i < o.grad.size(); ++i) parent.grad[i] += o.grad[i];
    }
  });
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = detail::make_op_output(a.shape(), {a, b}, [](detail::Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
  });
  const double* da = a.data();
  const double* db = b.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = da[i] - db[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = detail::make_op_output(a.shape(), {a, b}, [](detail::Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        pa.grad[i] += o.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        pb.grad[i] += o.grad[i] * pa.value[i];
  });
  const double* da = a.data();
  const double* db = b.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = da[i] * db[i];
  return out;
}

// x [m,n] + b [n], broadcast over the trailing axis.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  detail::check(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0),
                "add_bias: incompatible shapes " + shape_str(x.shape()) +
                    " vs " + shape_str(b.shape()));
  int m = x.dim(0), n = x.dim(1);
  Tensor out =
      detail::make_op_output(x.shape(), {x, b}, [m, n](detail::Node& o) {
        auto& px = *o.parents[0];
        auto& pb = *o.parents[1];
        if (px.requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i)
            px.grad[i] += o.grad[i];
        if (pb.requires_grad)
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              pb.grad[static_cast<std::size_t>(j)] +=
                  o.grad[static_cast<std::size_t>(i * n + j)];
      });
  const double* dx = x.data();
  const double* db = b.data();
  double* po = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[i * n + j] = dx[i * n + j] + db[j];
  return out;
}

// x [m,n] scaled per row by s [m], broadcast over the leading axis.
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  detail::check(x.rank() == 2 && s.rank() == 1 && x.dim(0) == s.dim(0),
                "scale_rows: incompatible shapes " + shape_str(x.shape()) +
                    " vs " + shape_str(s.shape()));
  int m = x.dim(0), n = x.dim(1);
  Tensor out =
      detail::make_op_output(x.shape(), {x, s}, [m, n](detail::Node& o) {
        auto& px = *o.parents[0];
        auto& ps = *o.parents[1];
        for (int i = 0; i < m; ++i) {
          double si = ps.value[static_cast<std::size_t>(i)];
          double acc = 0.0;
          for (int j = 0; j < n; ++j) {
            std::size_t k = static_cast<std::size_t>(i * n + j);
            if (px.requires_grad) px.grad[k] += o.grad[k] * si;
            acc += o.grad[k] * px.value[k];
          }
          if (ps.requires_grad) ps.grad[static_cast<std::size_t>(i)] += acc;
        }
      });
  const double* dx = x.data();
  const double* ds = s.data();
  double* po = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[i * n + j] = dx[i * n + j] * ds[i];
  return out;
}

inline Tensor scale(const Tensor& x, double c) {
  Tensor out = detail::make_op_output(x.shape(), {x}, [c](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      px.grad[i] += o.grad[i] * c;
  });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < x.size(); ++i) po[i] = dx[i] * c;
  return out;
}

inline Tensor add_scalar(const Tensor& x, double c) {
  Tensor out = detail::make_op_output(x.shape(), {x}, [](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
  });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < x.size(); ++i) po[i] = dx[i] + c;
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  Tensor out = detail::make_op_output(x.shape(), {x}, [](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (px.value[i] > 0.0) px.grad[i] += o.grad[i];
  });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < x.size(); ++i) po[i] = dx[i] > 0.0 ? dx[i] : 0.0;
  return out;
}

inline Tensor tanh_op(const Tensor& x) {
  Tensor out = detail::make_op_output(x.shape(), {x}, [](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      double y = o.value[i];
      px.grad[i] += o.grad[i] * (1.0 - y * y);
    }
  });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < x.size(); ++i) po[i] = std::tanh(dx[i]);
  return out;
}

inline Tensor exp_op(const Tensor& x) {
  Tensor out = detail::make_op_output(x.shape(), {x}, [](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      px.grad[i] += o.grad[i] * o.value[i];
  });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (std::int64_t i = 0; i < x.size(); ++i) po[i] = std::exp(dx[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                "matmul: incompatible shapes " + shape_str(a.shape()) +
                    " vs " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out =
      detail::make_op_output({m, n}, {a, b}, [m, k, n](detail::Node& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const double* go = o.grad.data();
        if (pa.requires_grad) {
          // dA = dC . B^T, row dots are contiguous.
          const double* vb = pb.value.data();
          double* ga = pa.grad.data();
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              const double* grow = go + static_cast<std::size_t>(i) * n;
              const double* brow = vb + static_cast<std::size_t>(kk) * n;
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[static_cast<std::size_t>(i) * k + kk] += acc;
            }
        }
        if (pb.requires_grad) {
          // dB = A^T . dC
          const double* va = pa.value.data();
          double* gb = pb.grad.data();
          for (int i = 0; i < m; ++i) {
            const double* arow = va + static_cast<std::size_t>(i) * k;
            const double* grow = go + static_cast<std::size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
              double aik = arow[kk];
              if (aik == 0.0) continue;
              double* gbrow = gb + static_cast<std::size_t>(kk) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
            }
          }
        }
      });
  const double* va = a.data();
  const double* vb = b.data();
  double* vo = out.data_mut();
  for (int i = 0; i < m; ++i) {
    const double* arow = va + static_cast<std::size_t>(i) * k;
    double* orow = vo + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = vb + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& x) {
  detail::check(x.rank() == 2, "transpose: expected rank-2 tensor, got " +
                                   shape_str(x.shape()));
  int m = x.dim(0), n = x.dim(1);
  Tensor out =
      detail::make_op_output({n, m}, {x}, [m, n](detail::Node& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            px.grad[static_cast<std::size_t>(i * n + j)] +=
                o.grad[static_cast<std::size_t>(j * m + i)];
      });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[j * m + i] = dx[i * n + j];
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::check(shape_numel(shape) == x.size(),
                "reshape: cannot view " + shape_str(x.shape()) + " as " +
                    shape_str(shape));
  Tensor out = detail::make_op_output(shape, {x}, [](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
  });
  std::memcpy(out.data_mut(), x.data(),
              static_cast<std::size_t>(x.size()) * sizeof(double));
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  detail::check(!parts.empty(), "concat: no inputs");
  detail::check(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  int m = 0, n = parts[0].rank() == 2 ? parts[0].dim(1) : 1;
  for (const Tensor& p : parts)
    detail::check(p.rank() == 2, "concat: expected rank-2 tensors");
  if (axis == 0) {
    for (const Tensor& p : parts) {
      detail::check(p.dim(1) == n, "concat: column mismatch " +
                                       shape_str(p.shape()));
      m += p.dim(0);
    }
  } else {
    m = parts[0].dim(0);
    n = 0;
    for (const Tensor& p : parts) {
      detail::check(p.dim(0) == m,
                    "concat: row mismatch " + shape_str(p.shape()));
      n += p.dim(1);
    }
  }
  std::vector<int> offsets;  // start offset of each part along `axis`
  int off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    off += p.dim(axis);
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = {m, n};
  node->value.assign(static_cast<std::size_t>(m) * n, 0.0);
  bool needs = false;
  if (grad_enabled())
    for (const Tensor& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& p : parts) node->parents.push_back(p.node_ptr());
    node->backprop = [axis, offsets, n](detail::Node& o) {
      for (std::size_t pi = 0; pi < o.parents.size(); ++pi) {
        auto& parent = *o.parents[pi];
        if (!parent.requires_grad) continue;
        int pm = parent.shape[0], pn = parent.shape[1];
        for (int i = 0; i < pm; ++i)
          for (int j = 0; j < pn; ++j) {
            int oi = axis == 0 ? i + offsets[pi] : i;
            int oj = axis == 0 ? j : j + offsets[pi];
            parent.grad[static_cast<std::size_t>(i * pn + j)] +=
                o.grad[static_cast<std::size_t>(oi * n + oj)];
          }
      }
    };
  }
  Tensor out(std::move(node));
  double* po = out.data_mut();
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& p = parts[pi];
    int pm = p.dim(0), pn = p.dim(1);
    const double* dp = p.data();
    for (int i = 0; i < pm; ++i)
      for (int j = 0; j < pn; ++j) {
        int oi = axis == 0 ? i + offsets[pi] : i;
        int oj = axis == 0 ? j : j + offsets[pi];
        po[oi * n + oj] = dp[i * pn + j];
      }
  }
  return out;
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  detail::check(x.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= x.dim(0),
                "slice_rows: bad range on " + shape_str(x.shape()));
  int n = x.dim(1);
  Tensor out = detail::make_op_output({r1 - r0, n}, {x},
                                      [r0, n](detail::Node& o) {
                                        auto& px = *o.parents[0];
                                        if (!px.requires_grad) return;
                                        std::size_t base =
                                            static_cast<std::size_t>(r0) * n;
                                        for (std::size_t i = 0;
                                             i < o.grad.size(); ++i)
                                          px.grad[base + i] += o.grad[i];
                                      });
  std::memcpy(out.data_mut(), x.data() + static_cast<std::size_t>(r0) * n,
              static_cast<std::size_t>(r1 - r0) * n * sizeof(double));
  return out;
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  detail::check(x.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1),
                "slice_cols: bad range on " + shape_str(x.shape()));
  int m = x.dim(0), n = x.dim(1), w = c1 - c0;
  Tensor out =
      detail::make_op_output({m, w}, {x}, [c0, m, n, w](detail::Node& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            px.grad[static_cast<std::size_t>(i * n + c0 + j)] +=
                o.grad[static_cast<std::size_t>(i * w + j)];
      });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) po[i * w + j] = dx[i * n + c0 + j];
  return out;
}

// v [n] repeated over `rows` rows -> [rows, n].
inline Tensor broadcast_row(const Tensor& v, int rows) {
  detail::check(v.rank() == 1, "broadcast_row: expected vector, got " +
                                   shape_str(v.shape()));
  int n = v.dim(0);
  Tensor out =
      detail::make_op_output({rows, n}, {v}, [rows, n](detail::Node& o) {
        auto& pv = *o.parents[0];
        if (!pv.requires_grad) return;
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < n; ++j)
            pv.grad[static_cast<std::size_t>(j)] +=
                o.grad[static_cast<std::size_t>(i * n + j)];
      });
  const double* dv = v.data();
  double* po = out.data_mut();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < n; ++j) po[i * n + j] = dv[j];
  return out;
}

// Rows of `table` gathered by token id -> [len, width].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  detail::check(table.rank() == 2, "embedding: table must be rank-2");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    detail::check(0 <= id && id < v,
                  "embedding: id " + std::to_string(id) +
                      " out of range for table " + shape_str(table.shape()));
  int len = static_cast<int>(ids.size());
  Tensor out =
      detail::make_op_output({len, d}, {table}, [ids, d](detail::Node& o) {
        auto& pt = *o.parents[0];
        if (!pt.requires_grad) return;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* dst = pt.grad.data() +
                        static_cast<std::size_t>(ids[i]) * d;
          const double* src = o.grad.data() + i * static_cast<std::size_t>(d);
          for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
      });
  double* po = out.data_mut();
  const double* dt = table.data();
  for (int i = 0; i < len; ++i)
    std::memcpy(po + static_cast<std::size_t>(i) * d,
                dt + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d,
                static_cast<std::size_t>(d) * sizeof(double));
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  Tensor out = detail::make_op_output({1}, {x}, [](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (std::size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += o.grad[0];
  });
  double acc = 0.0;
  const double* dx = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) acc += dx[i];
  out.data_mut()[0] = acc;
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// Mean of a rank-2 tensor along `axis` (0: down columns, 1: across rows).
inline Tensor mean_axis(const Tensor& x, int axis) {
  detail::check(x.rank() == 2 && (axis == 0 || axis == 1),
                "mean_axis: expected rank-2 tensor and axis 0/1");
  int m = x.dim(0), n = x.dim(1);
  int out_len = axis == 0 ? n : m;
  double inv = axis == 0 ? 1.0 / m : 1.0 / n;
  Tensor out = detail::make_op_output(
      {out_len}, {x}, [m, n, axis, inv](detail::Node& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            px.grad[static_cast<std::size_t>(i * n + j)] +=
                o.grad[static_cast<std::size_t>(axis == 0 ? j : i)] * inv;
      });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[axis == 0 ? j : i] += dx[i * n + j] * inv;
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations and losses
// ---------------------------------------------------------------------------

// Softmax along `axis` of a rank-1/2 tensor, max-subtracted for stability.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  if (x.rank() == 1) {
    detail::check(axis == -1 || axis == 0, "softmax: bad axis for vector");
    Tensor row = reshape(x, {1, x.dim(0)});
    return reshape(softmax(row, 1), {x.dim(0)});
  }
  detail::check(x.rank() == 2, "softmax: expected rank-1/2 tensor, got " +
                                   shape_str(x.shape()));
  if (axis == -1) axis = 1;
  detail::check(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
  int m = x.dim(0), n = x.dim(1);
  // Iterate groups: axis 1 normalizes each row, axis 0 each column.
  int groups = axis == 1 ? m : n;
  int len = axis == 1 ? n : m;
  auto idx = [axis, n](int g, int t) {
    return axis == 1 ? static_cast<std::size_t>(g * n + t)
                     : static_cast<std::size_t>(t * n + g);
  };
  Tensor out = detail::make_op_output(
      x.shape(), {x}, [groups, len, idx](detail::Node& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (int g = 0; g < groups; ++g) {
          double dot = 0.0;
          for (int t = 0; t < len; ++t)
            dot += o.value[idx(g, t)] * o.grad[idx(g, t)];
          for (int t = 0; t < len; ++t)
            px.grad[idx(g, t)] +=
                o.value[idx(g, t)] * (o.grad[idx(g, t)] - dot);
        }
      });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (int g = 0; g < groups; ++g) {
    double mx = -1e308;
    for (int t = 0; t < len; ++t) mx = std::max(mx, dx[idx(g, t)]);
    double z = 0.0;
    for (int t = 0; t < len; ++t) {
      double e = std::exp(dx[idx(g, t)] - mx);
      po[idx(g, t)] = e;
      z += e;
    }
    for (int t = 0; t < len; ++t) po[idx(g, t)] /= z;
  }
  return out;
}

// Row-wise log-softmax of a rank-2 tensor (last axis).
inline Tensor log_softmax(const Tensor& x) {
  detail::check(x.rank() == 2, "log_softmax: expected rank-2 tensor");
  int m = x.dim(0), n = x.dim(1);
  Tensor out = detail::make_op_output(x.shape(), {x}, [m, n](detail::Node& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    for (int i = 0; i < m; ++i) {
      double gsum = 0.0;
      for (int j = 0; j < n; ++j)
        gsum += o.grad[static_cast<std::size_t>(i * n + j)];
      for (int j = 0; j < n; ++j) {
        std::size_t k = static_cast<std::size_t>(i * n + j);
        px.grad[k] += o.grad[k] - std::exp(o.value[k]) * gsum;
      }
    }
  });
  const double* dx = x.data();
  double* po = out.data_mut();
  for (int i = 0; i < m; ++i) {
    const double* row = dx + static_cast<std::size_t>(i) * n;
    double mx = -1e308;
    for (int j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    double lse = mx + std::log(z);
    for (int j = 0; j < n; ++j) po[i * n + j] = row[j] - lse;
  }
  return out;
}

// Per-row normalization over the last axis: unit mean/variance, then an
// affine gain and bias of width n.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias) {
  constexpr double kEps = 1e-12;
  Tensor x2 = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  detail::check(x2.rank() == 2, "layer_norm: expected rank-1/2 tensor");
  int m = x2.dim(0), n = x2.dim(1);
  detail::check(gain.rank() == 1 && gain.dim(0) == n && bias.rank() == 1 &&
                    bias.dim(0) == n,
                "layer_norm: gain/bias must be vectors of width " +
                    std::to_string(n));
  Tensor out = detail::make_op_output(
      {m, n}, {x2, gain, bias}, [m, n](detail::Node& o) {
        auto& px = *o.parents[0];
        auto& pg = *o.parents[1];
        auto& pb = *o.parents[2];
        for (int i = 0; i < m; ++i) {
          const double* xrow = px.value.data() + static_cast<std::size_t>(i) * n;
          const double* grow = o.grad.data() + static_cast<std::size_t>(i) * n;
          double mean = 0.0;
          for (int j = 0; j < n; ++j) mean += xrow[j];
          mean /= n;
          double var = 0.0;
          for (int j = 0; j < n; ++j) {
            double d = xrow[j] - mean;
            var += d * d;
          }
          var /= n;
          double inv = 1.0 / std::sqrt(var + kEps);
          // dL/dxhat per element, then the closed-form layer-norm backward.
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < n; ++j) {
            double xhat = (xrow[j] - mean) * inv;
            double dxhat = grow[j] * pg.value[static_cast<std::size_t>(j)];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (pg.requires_grad)
              pg.grad[static_cast<std::size_t>(j)] += grow[j] * xhat;
            if (pb.requires_grad) pb.grad[static_cast<std::size_t>(j)] += grow[j];
          }
          if (px.requires_grad) {
            double* gxrow = px.grad.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
              double xhat = (xrow[j] - mean) * inv;
              double dxhat = grow[j] * pg.value[static_cast<std::size_t>(j)];
              gxrow[j] += inv * (dxhat - sum_dxhat / n -
                                 xhat * sum_dxhat_xhat / n);
            }
          }
        }
      });
  const double* dx = x2.data();
  const double* dg = gain.data();
  const double* db = bias.data();
  double* po = out.data_mut();
  for (int i = 0; i < m; ++i) {
    const double* row = dx + static_cast<std::size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + kEps);
    for (int j = 0; j < n; ++j)
      po[i * n + j] = (row[j] - mean) * inv * dg[j] + db[j];
  }
  if (x.rank() == 1) return reshape(out, {n});
  return out;
}

// 1-D convolution over the sequence axis, stride 1, zero 'same' padding.
// x [len, in_ch], w [out_ch, in_ch, k] with odd k, b [out_ch].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::check(x.rank() == 2 && w.rank() == 3 && b.rank() == 1,
                "conv1d: expected x[len,in], w[out,in,k], b[out]");
  int len = x.dim(0), in_ch = x.dim(1);
  int out_ch = w.dim(0), k = w.dim(2);
  detail::check(w.dim(1) == in_ch, "conv1d: channel mismatch " +
                                       shape_str(x.shape()) + " vs " +
                                       shape_str(w.shape()));
  detail::check(k % 2 == 1, "conv1d: kernel width must be odd");
  detail::check(b.dim(0) == out_ch, "conv1d: bias width mismatch");
  int half = k / 2;
  Tensor out = detail::make_op_output(
      {len, out_ch}, {x, w, b},
      [len, in_ch, out_ch, k, half](detail::Node& o) {
        auto& px = *o.parents[0];
        auto& pw = *o.parents[1];
        auto& pb = *o.parents[2];
        for (int t = 0; t < len; ++t)
          for (int oc = 0; oc < out_ch; ++oc) {
            double g = o.grad[static_cast<std::size_t>(t * out_ch + oc)];
            if (g == 0.0) continue;
            if (pb.requires_grad) pb.grad[static_cast<std::size_t>(oc)] += g;
            for (int dk = 0; dk < k; ++dk) {
              int src = t + dk - half;
              if (src < 0 || src >= len) continue;
              for (int ic = 0; ic < in_ch; ++ic) {
                std::size_t wi =
                    static_cast<std::size_t>((oc * in_ch + ic) * k + dk);
                std::size_t xi = static_cast<std::size_t>(src * in_ch + ic);
                if (px.requires_grad) px.grad[xi] += g * pw.value[wi];
                if (pw.requires_grad) pw.grad[wi] += g * px.value[xi];
              }
            }
          }
      });
  const double* dx = x.data();
  const double* dw = w.data();
  const double* db = b.data();
  double* po = out.data_mut();
  for (int t = 0; t < len; ++t)
    for (int oc = 0; oc < out_ch; ++oc) {
      double acc = db[oc];
      for (int dk = 0; dk < k; ++dk) {
        int src = t + dk - half;
        if (src < 0 || src >= len) continue;
        const double* xrow = dx + static_cast<std::size_t>(src) * in_ch;
        const double* wrow = dw + static_cast<std::size_t>(oc * in_ch) * k + dk;
        for (int ic = 0; ic < in_ch; ++ic) acc += xrow[ic] * wrow[ic * k];
      }
      po[t * out_ch + oc] = acc;
    }
  return out;
}

// Mean token-level cross entropy from logits [len, vocab] against integer
// targets, skipping positions whose target equals ignore_id. Log-sum-exp
// formulation; the backward is (softmax - one_hot) / kept_count.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            int ignore_id) {
  detail::check(logits.rank() == 2, "cross_entropy: logits must be rank-2");
  int len = logits.dim(0), vocab = logits.dim(1);
  detail::check(static_cast<int>(targets.size()) == len,
                "cross_entropy: " + std::to_string(targets.size()) +
                    " targets for " + std::to_string(len) + " logit rows");
  int kept = 0;
  for (int t : targets)
    if (t != ignore_id) ++kept;
  detail::check(kept > 0, "cross_entropy: every position is ignored");
  for (int t : targets)
    detail::check(t == ignore_id || (0 <= t && t < vocab),
                  "cross_entropy: target id " + std::to_string(t) +
                      " outside vocab " + std::to_string(vocab));
  Tensor out = detail::make_op_output(
      {1}, {logits}, [targets, ignore_id, len, vocab, kept](detail::Node& o) {
        auto& pl = *o.parents[0];
        if (!pl.requires_grad) return;
        double g = o.grad[0] / kept;
        for (int i = 0; i < len; ++i) {
          int tgt = targets[static_cast<std::size_t>(i)];
          if (tgt == ignore_id) continue;
          const double* row = pl.value.data() + static_cast<std::size_t>(i) * vocab;
          double* grow = pl.grad.data() + static_cast<std::size_t>(i) * vocab;
          double mx = -1e308;
          for (int j = 0; j < vocab; ++j) mx = std::max(mx, row[j]);
          double z = 0.0;
          for (int j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
          for (int j = 0; j < vocab; ++j) {
            double p = std::exp(row[j] - mx) / z;
            grow[j] += g * (p - (j == tgt ? 1.0 : 0.0));
          }
        }
      });
  const double* dl = logits.data();
  double acc = 0.0;
  for (int i = 0; i < len; ++i) {
    int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt == ignore_id) continue;
    const double* row = dl + static_cast<std::size_t>(i) * vocab;
    double mx = -1e308;
    for (int j = 0; j < vocab; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    acc += mx + std::log(z) - row[tgt];
  }
  out.data_mut()[0] = acc / kept;
  return out;
}

// ---------------------------------------------------------------------------
// Attention-specific indexing ops
// ---------------------------------------------------------------------------

constexpr double kMaskValue = -1e30;

// Additive mask: key positions with keep=false get kMaskValue; with causal
// set, score[i][j] for j > i is masked as well.
inline Tensor attention_mask(const Tensor& scores,
                             const std::vector<std::uint8_t>& keep,
                             bool causal) {
  detail::check(scores.rank() == 2, "attention_mask: scores must be rank-2");
  int lq = scores.dim(0), lk = scores.dim(1);
  detail::check(keep.empty() || static_cast<int>(keep.size()) == lk,
                "attention_mask: keep mask length " +
                    std::to_string(keep.size()) + " vs keys " +
                    std::to_string(lk));
  Tensor out = detail::make_op_output(
      scores.shape(), {scores}, [keep, causal, lq, lk](detail::Node& o) {
        auto& ps = *o.parents[0];
        if (!ps.requires_grad) return;
        for (int i = 0; i < lq; ++i)
          for (int j = 0; j < lk; ++j) {
            bool masked =
                (!keep.empty() && !keep[static_cast<std::size_t>(j)]) ||
                (causal && j > i);
            if (!masked)
              ps.grad[static_cast<std::size_t>(i * lk + j)] +=
                  o.grad[static_cast<std::size_t>(i * lk + j)];
          }
      });
  const double* ds = scores.data();
  double* po = out.data_mut();
  for (int i = 0; i < lq; ++i)
    for (int j = 0; j < lk; ++j) {
      bool masked = (!keep.empty() && !keep[static_cast<std::size_t>(j)]) ||
                    (causal && j > i);
      po[i * lk + j] = masked ? kMaskValue : ds[i * lk + j];
    }
  return out;
}

namespace detail {
inline int rel_bucket(int query, int key, int clip) {
  int d = key - query;
  if (d < -clip) d = -clip;
  if (d > clip) d = clip;
  return d + clip;
}
}  // namespace detail

// Expands per-bucket scores qp [len, 2*clip+1] into a full [len, len] matrix
// where entry (i, j) reads bucket clip(j - i). Used for the positional term
// of self-attention scores.
inline Tensor rel_bias_expand(const Tensor& qp, int len, int clip) {
  int buckets = 2 * clip + 1;
  detail::check(qp.rank() == 2 && qp.dim(0) == len && qp.dim(1) == buckets,
                "rel_bias_expand: expected [" + std::to_string(len) + " x " +
                    std::to_string(buckets) + "], got " +
                    shape_str(qp.shape()));
  Tensor out = detail::make_op_output(
      {len, len}, {qp}, [len, clip, buckets](detail::Node& o) {
        auto& pq = *o.parents[0];
        if (!pq.requires_grad) return;
        for (int i = 0; i < len; ++i)
          for (int j = 0; j < len; ++j)
            pq.grad[static_cast<std::size_t>(
                i * buckets + detail::rel_bucket(i, j, clip))] +=
                o.grad[static_cast<std::size_t>(i * len + j)];
      });
  const double* dq = qp.data();
  double* po = out.data_mut();
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j)
      po[i * len + j] = dq[i * buckets + detail::rel_bucket(i, j, clip)];
  return out;
}

// Adjoint indexing of rel_bias_expand: folds attention weights [len, len]
// into per-bucket sums [len, 2*clip+1], so the positional value term is
// matmul(rel_weight_collapse(w), table).
inline Tensor rel_weight_collapse(const Tensor& w, int clip) {
  detail::check(w.rank() == 2 && w.dim(0) == w.dim(1),
                "rel_weight_collapse: expected square weights, got " +
                    shape_str(w.shape()));
  int len = w.dim(0);
  int buckets = 2 * clip + 1;
  Tensor out = detail::make_op_output(
      {len, buckets}, {w}, [len, clip, buckets](detail::Node& o) {
        auto& pw = *o.parents[0];
        if (!pw.requires_grad) return;
        for (int i = 0; i < len; ++i)
          for (int j = 0; j < len; ++j)
            pw.grad[static_cast<std::size_t>(i * len + j)] +=
                o.grad[static_cast<std::size_t>(
                    i * buckets + detail::rel_bucket(i, j, clip))];
      });
  const double* dw = w.data();
  double* po = out.data_mut();
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j)
      po[i * buckets + detail::rel_bucket(i, j, clip)] += dw[i * len + j];
  return out;
}

}  // namespace crepair
