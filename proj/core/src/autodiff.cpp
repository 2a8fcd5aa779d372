#include "physfed/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "physfed/error.hpp"

namespace physfed::ad {

namespace {

std::atomic<Fault> g_fault{Fault::None};

void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, std::string("non-finite output from ") + op);
  }
}

Tape& tape_of(Var v) {
  require(v.tape != nullptr, ErrorCode::InvalidArgument, "variable is not attached to a tape");
  return *v.tape;
}

void same_tape(Var a, Var b) {
  require(a.tape == b.tape, ErrorCode::InvalidArgument, "variables live on different tapes");
}

void accumulate(std::vector<Tensor>& grads, int id, const Tensor& g) {
  auto& dst = grads[static_cast<std::size_t>(id)];
  if (dst.size() == 0) {
    dst = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// Strides of `shape` used to address it from an index over `out`, with 0 on
// broadcast axes.
std::vector<std::size_t> broadcast_strides(const std::vector<int>& shape, const std::vector<int>& out) {
  std::vector<std::size_t> strides(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t k = shape.size(); k-- > 0;) {
    strides[k] = (shape[k] == out[k]) ? s : 0;
    s *= static_cast<std::size_t>(shape[k]);
  }
  return strides;
}

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch,
          std::string(op) + ": rank mismatch " + shape_string(a) + " vs " + shape_string(b));
  std::vector<int> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    require(a[k] == b[k] || a[k] == 1 || b[k] == 1, ErrorCode::ShapeMismatch,
            std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    out[k] = std::max(a[k], b[k]);
  }
  return out;
}

// Calls fn(out_index, a_offset, b_offset) over every element of `out`.
template <typename Fn>
void for_each_broadcast(const std::vector<int>& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t rank = out.size();
  const std::size_t n = shape_size(out);
  std::vector<int> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      oa += sa[k];
      ob += sb[k];
      if (idx[k] < out[k]) break;
      oa -= sa[k] * static_cast<std::size_t>(out[k]);
      ob -= sb[k] * static_cast<std::size_t>(out[k]);
      idx[k] = 0;
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

Var binary(Var a, Var b, BinaryKind kind, const char* name) {
  same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto out_shape = broadcast_shape(av.shape(), bv.shape(), name);
  const auto sa = broadcast_strides(av.shape(), out_shape);
  const auto sb = broadcast_strides(bv.shape(), out_shape);
  Tensor out(out_shape);
  for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case BinaryKind::Add: out[i] = av[ia] + bv[ib]; break;
      case BinaryKind::Sub: out[i] = av[ia] - bv[ib]; break;
      case BinaryKind::Mul: out[i] = av[ia] * bv[ib]; break;
    }
  });
  check_finite(out, name);
  Tape& tape = tape_of(a);
  const int ida = a.id;
  const int idb = b.id;
  return tape.record(std::move(out), {ida, idb},
                     [&tape, ida, idb, out_shape, sa, sb, kind](const Tensor& g, std::vector<Tensor>& grads) {
                       const auto& av = tape.value(ida);
                       const auto& bv = tape.value(idb);
                       Tensor ga(av.shape());
                       Tensor gb(bv.shape());
                       for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         switch (kind) {
                           case BinaryKind::Add:
                             ga[ia] += g[i];
                             gb[ib] += g[i];
                             break;
                           case BinaryKind::Sub:
                             ga[ia] += g[i];
                             gb[ib] -= g[i];
                             break;
                           case BinaryKind::Mul:
                             ga[ia] += g[i] * bv[ib];
                             gb[ib] += g[i] * av[ia];
                             break;
                         }
                       });
                       accumulate(grads, ida, ga);
                       accumulate(grads, idb, gb);
                     });
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// 3x3 convolution as nine shifted GEMMs on a zero-padded copy. Rows are
// channels, columns are positions on the (H+2) x (W+2) padded grid; the
// contiguous column range [first, first + span) covers every interior pixel.
struct PaddedGrid {
  int h;
  int w;
  Eigen::Index stride() const { return w + 2; }
  Eigen::Index size() const { return static_cast<Eigen::Index>(h + 2) * (w + 2); }
  Eigen::Index first() const { return stride() + 1; }
  Eigen::Index span() const { return static_cast<Eigen::Index>(h - 1) * stride() + w; }
  Eigen::Index offset(int ky, int kx) const { return (ky - 1) * stride() + (kx - 1); }

  RowMatrix pad(const double* planes, int channels) const {
    RowMatrix m = RowMatrix::Zero(channels, size());
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < h; ++y) {
        const double* src = planes + (static_cast<std::size_t>(c) * h + y) * w;
        std::copy(src, src + w, m.row(c).data() + (y + 1) * stride() + 1);
      }
    return m;
  }

  void unpad(const RowMatrix& m, double* planes) const {
    for (Eigen::Index c = 0; c < m.rows(); ++c)
      for (int y = 0; y < h; ++y) {
        const double* src = m.row(c).data() + (y + 1) * stride() + 1;
        std::copy(src, src + w, planes + (static_cast<std::size_t>(c) * h + y) * w);
      }
  }
};

// Kernel tap (ky, kx) as a cout x cin matrix.
RowMatrix kernel_tap(const Tensor& w, int ky, int kx) {
  const int cout = w.dim(0);
  const int cin = w.dim(1);
  RowMatrix k(cout, cin);
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i) k(o, i) = w[((static_cast<std::size_t>(o) * cin + i) * 3 + ky) * 3 + kx];
  return k;
}

void matmul_raw(const double* a, const double* b, double* c, int p, int q, int r) {
  for (int i = 0; i < p; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * r;
    for (int k = 0; k < q; ++k) {
      const double aik = a[static_cast<std::size_t>(i) * q + k];
      const double* brow = b + static_cast<std::size_t>(k) * r;
      for (int j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

}  // namespace

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_size(shape_) == data_.size(), ErrorCode::ShapeMismatch,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_string(shape_));
}

double Tensor::item() const {
  require(data_.size() == 1, ErrorCode::NonScalarLoss, "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t k = 0; k < shape.size(); ++k) os << (k ? "x" : "") << shape[k];
  os << ']';
  return os.str();
}

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    require(d >= 0, ErrorCode::ShapeMismatch, "negative dimension in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

const Tensor& Var::value() const { return tape_of(*this).value(id); }

Var Tape::leaf(Tensor value) {
  check_finite(value, "leaf");
  nodes_.push_back({std::move(value), {}, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> inputs, Backward backward) {
  nodes_.push_back({std::move(value), std::move(inputs), std::move(backward)});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Gradients Tape::backward(Var loss) const {
  require(loss.tape == this, ErrorCode::InvalidArgument, "loss node belongs to another tape");
  const auto& lv = value(loss.id);
  require(lv.size() == 1, ErrorCode::NonScalarLoss, "loss has shape " + shape_string(lv.shape()));
  std::vector<Tensor> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id)] = Tensor(lv.shape(), 1.0);
  for (int id = loss.id; id >= 0; --id) {
    const auto& node = nodes_[static_cast<std::size_t>(id)];
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.size() == 0 || !node.backward) continue;
    node.backward(g, grads);
    for (int in : node.inputs) {
      for (double v : grads[static_cast<std::size_t>(in)].data()) {
        if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient at node " + std::to_string(in));
      }
    }
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (grads[id].size() == 0) grads[id] = Tensor(nodes_[id].value.shape(), 0.0);
  }
  return Gradients(std::move(grads));
}

Var conv2d(Var input, Var kernels, Var bias) {
  same_tape(input, kernels);
  same_tape(input, bias);
  const auto& x = input.value();
  const auto& w = kernels.value();
  const auto& b = bias.value();
  require(x.rank() == 3, ErrorCode::ShapeMismatch, "conv2d input must be CxHxW, got " + shape_string(x.shape()));
  require(w.rank() == 4 && w.dim(1) == x.dim(0) && w.dim(2) == 3 && w.dim(3) == 3, ErrorCode::ShapeMismatch,
          "conv2d kernels " + shape_string(w.shape()) + " do not fit input " + shape_string(x.shape()));
  require(b.size() == static_cast<std::size_t>(w.dim(0)), ErrorCode::ShapeMismatch, "conv2d bias length mismatch");
  const int cin = x.dim(0);
  const int h = x.dim(1);
  const int wd = x.dim(2);
  const int cout = w.dim(0);

  const PaddedGrid grid{h, wd};
  const RowMatrix xp = grid.pad(x.data().data(), cin);
  RowMatrix op = RowMatrix::Zero(cout, grid.size());
  auto interior = op.middleCols(grid.first(), grid.span());
  for (int ky = 0; ky < 3; ++ky)
    for (int kx = 0; kx < 3; ++kx)
      interior.noalias() += kernel_tap(w, ky, kx) * xp.middleCols(grid.first() + grid.offset(ky, kx), grid.span());
  interior.colwise() += Eigen::Map<const Eigen::VectorXd>(b.data().data(), cout);
  Tensor out({cout, h, wd});
  grid.unpad(op, out.data().data());
  check_finite(out, "conv2d");
  Tape& tape = tape_of(input);
  const int ix = input.id;
  const int iw = kernels.id;
  const int ib = bias.id;
  return tape.record(std::move(out), {ix, iw, ib}, [&tape, ix, iw, ib](const Tensor& g, std::vector<Tensor>& grads) {
    const auto& x = tape.value(ix);
    const auto& w = tape.value(iw);
    const int cin = x.dim(0);
    const int h = x.dim(1);
    const int wd = x.dim(2);
    const int cout = w.dim(0);
    const Eigen::Index plane = static_cast<Eigen::Index>(h) * wd;
    const PaddedGrid grid{h, wd};
    const RowMatrix xp = grid.pad(x.data().data(), cin);
    const RowMatrix gp = grid.pad(g.data().data(), cout);
    const auto g_in = gp.middleCols(grid.first(), grid.span());
    const bool transposed_fault = g_fault.load() == Fault::ConvTransposedKernel;

    // Plain loop: Eigen's vectorized reduction order depends on buffer alignment.
    Tensor gb({cout});
    for (int o = 0; o < cout; ++o) {
      const double* row = g.data().data() + static_cast<std::size_t>(o) * plane;
      double acc = 0.0;
      for (Eigen::Index p = 0; p < plane; ++p) acc += row[p];
      gb[static_cast<std::size_t>(o)] = acc;
    }

    Tensor gw(w.shape());
    RowMatrix gxp = RowMatrix::Zero(cin, grid.size());
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index off = grid.first() + grid.offset(ky, kx);
        const RowMatrix tap_grad = g_in * xp.middleCols(off, grid.span()).transpose();
        for (int o = 0; o < cout; ++o)
          for (int i = 0; i < cin; ++i) gw[((static_cast<std::size_t>(o) * cin + i) * 3 + ky) * 3 + kx] = tap_grad(o, i);
        const RowMatrix k = transposed_fault ? kernel_tap(w, kx, ky) : kernel_tap(w, ky, kx);
        gxp.middleCols(off, grid.span()).noalias() += k.transpose() * g_in;
      }
    Tensor gx(x.shape());
    grid.unpad(gxp, gx.data().data());

    accumulate(grads, ix, gx);
    accumulate(grads, iw, gw);
    accumulate(grads, ib, gb);
  });
}

Var linear(Var x, Var w, Var b) {
  same_tape(x, w);
  same_tape(x, b);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  require(xv.rank() == 2 && xv.dim(0) == 1, ErrorCode::ShapeMismatch, "linear input must be 1xn, got " + shape_string(xv.shape()));
  require(wv.rank() == 2 && wv.dim(0) == xv.dim(1), ErrorCode::ShapeMismatch,
          "linear weight " + shape_string(wv.shape()) + " does not fit input " + shape_string(xv.shape()));
  require(bv.size() == static_cast<std::size_t>(wv.dim(1)), ErrorCode::ShapeMismatch, "linear bias length mismatch");
  const int n = wv.dim(0);
  const int m = wv.dim(1);
  Tensor out({1, m}, bv.data());
  matmul_raw(xv.data().data(), wv.data().data(), out.data().data(), 1, n, m);
  check_finite(out, "linear");
  Tape& tape = tape_of(x);
  const int ix = x.id;
  const int iw = w.id;
  const int ib = b.id;
  return tape.record(std::move(out), {ix, iw, ib}, [&tape, ix, iw, ib, n, m](const Tensor& g, std::vector<Tensor>& grads) {
    const auto& xv = tape.value(ix);
    const auto& wv = tape.value(iw);
    Tensor gx(xv.shape());
    Tensor gw(wv.shape());
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < m; ++j) {
        s += wv[static_cast<std::size_t>(i) * m + j] * g[static_cast<std::size_t>(j)];
        gw[static_cast<std::size_t>(i) * m + j] = xv[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)];
      }
      gx[static_cast<std::size_t>(i)] = s;
    }
    accumulate(grads, ix, gx);
    accumulate(grads, iw, gw);
    accumulate(grads, ib, Tensor(tape.value(ib).shape(), g.data()));
  });
}

Var relu(Var x) {
  const auto& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tape& tape = tape_of(x);
  const int ix = x.id;
  return tape.record(std::move(out), {ix}, [&tape, ix](const Tensor& g, std::vector<Tensor>& grads) {
    const auto& xv = tape.value(ix);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
    accumulate(grads, ix, gx);
  });
}

Var avgpool1d(Var x, int factor) {
  const auto& xv = x.value();
  require(xv.rank() == 2 && xv.dim(0) == 1, ErrorCode::ShapeMismatch, "avgpool1d input must be 1xd");
  require(factor >= 1 && xv.dim(1) % factor == 0, ErrorCode::ShapeMismatch,
          "avgpool1d: length " + std::to_string(xv.dim(1)) + " not divisible by " + std::to_string(factor));
  const int d = xv.dim(1) / factor;
  Tensor out({1, d});
  for (int i = 0; i < d; ++i) {
    double s = 0.0;
    for (int k = 0; k < factor; ++k) s += xv[static_cast<std::size_t>(i * factor + k)];
    out[static_cast<std::size_t>(i)] = s / factor;
  }
  Tape& tape = tape_of(x);
  const int ix = x.id;
  return tape.record(std::move(out), {ix}, [&tape, ix, factor, d](const Tensor& g, std::vector<Tensor>& grads) {
    Tensor gx(tape.value(ix).shape());
    for (int i = 0; i < d; ++i) {
      for (int k = 0; k < factor; ++k) gx[static_cast<std::size_t>(i * factor + k)] = g[static_cast<std::size_t>(i)] / factor;
    }
    accumulate(grads, ix, gx);
  });
}

Var softmax(Var x) {
  const auto& xv = x.value();
  require(xv.rank() == 2, ErrorCode::ShapeMismatch, "softmax expects a rank-2 tensor");
  const int rows = xv.dim(0);
  const int cols = xv.dim(1);
  Tensor out(xv.shape());
  for (int r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + static_cast<std::size_t>(r) * cols;
    double* o = out.data().data() + static_cast<std::size_t>(r) * cols;
    const double mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += (o[c] = std::exp(in[c] - mx));
    for (int c = 0; c < cols; ++c) o[c] /= s;
  }
  Tape& tape = tape_of(x);
  const int ix = x.id;
  // Backward reads the op's own output, which lands at the next node id.
  const int iy = static_cast<int>(tape.size());
  return tape.record(std::move(out), {ix}, [&tape, iy, rows, cols, ix](const Tensor& g, std::vector<Tensor>& grads) {
    const auto& y = tape.value(iy);
    Tensor gx({rows, cols});
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * cols;
      double s = 0.0;
      for (int c = 0; c < cols; ++c) s += g[off + c] * y[off + c];
      for (int c = 0; c < cols; ++c) gx[off + c] = y[off + c] * (g[off + c] - s);
    }
    accumulate(grads, ix, gx);
  });
}

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), ErrorCode::ShapeMismatch,
          "matmul " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  const int p = av.dim(0);
  const int q = av.dim(1);
  const int r = bv.dim(1);
  Tensor out({p, r});
  matmul_raw(av.data().data(), bv.data().data(), out.data().data(), p, q, r);
  check_finite(out, "matmul");
  Tape& tape = tape_of(a);
  const int ia = a.id;
  const int ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [&tape, ia, ib, p, q, r](const Tensor& g, std::vector<Tensor>& grads) {
    const auto& av = tape.value(ia);
    const auto& bv = tape.value(ib);
    Tensor ga({p, q});
    Tensor gb({q, r});
    for (int i = 0; i < p; ++i) {
      for (int k = 0; k < q; ++k) {
        double s = 0.0;
        for (int j = 0; j < r; ++j) s += g[static_cast<std::size_t>(i) * r + j] * bv[static_cast<std::size_t>(k) * r + j];
        ga[static_cast<std::size_t>(i) * q + k] = s;
      }
    }
    for (int k = 0; k < q; ++k) {
      for (int j = 0; j < r; ++j) {
        double s = 0.0;
        for (int i = 0; i < p; ++i) s += av[static_cast<std::size_t>(i) * q + k] * g[static_cast<std::size_t>(i) * r + j];
        gb[static_cast<std::size_t>(k) * r + j] = s;
      }
    }
    accumulate(grads, ia, ga);
    accumulate(grads, ib, gb);
  });
}

Var transpose(Var a) {
  const auto& av = a.value();
  require(av.rank() == 2, ErrorCode::ShapeMismatch, "transpose expects a rank-2 tensor");
  const int p = av.dim(0);
  const int q = av.dim(1);
  Tensor out({q, p});
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < q; ++j) out[static_cast<std::size_t>(j) * p + i] = av[static_cast<std::size_t>(i) * q + j];
  Tape& tape = tape_of(a);
  const int ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, p, q](const Tensor& g, std::vector<Tensor>& grads) {
    Tensor ga({p, q});
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < q; ++j) ga[static_cast<std::size_t>(i) * q + j] = g[static_cast<std::size_t>(j) * p + i];
    accumulate(grads, ia, ga);
  });
}

Var add(Var a, Var b) { return binary(a, b, BinaryKind::Add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Var scale(Var a, double s) {
  const auto& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = s * av[i];
  check_finite(out, "scale");
  Tape& tape = tape_of(a);
  const int ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, s](const Tensor& g, std::vector<Tensor>& grads) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = s * g[i];
    accumulate(grads, ia, ga);
  });
}

Var add_scalar(Var a, double s) {
  const auto& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
  check_finite(out, "add_scalar");
  Tape& tape = tape_of(a);
  const int ia = a.id;
  return tape.record(std::move(out), {ia}, [ia](const Tensor& g, std::vector<Tensor>& grads) { accumulate(grads, ia, g); });
}

Var reshape(Var a, std::vector<int> shape) {
  const auto& av = a.value();
  require(shape_size(shape) == av.size(), ErrorCode::ShapeMismatch,
          "reshape " + shape_string(av.shape()) + " -> " + shape_string(shape));
  Tape& tape = tape_of(a);
  const int ia = a.id;
  const auto in_shape = av.shape();
  return tape.record(Tensor(std::move(shape), av.data()), {ia}, [ia, in_shape](const Tensor& g, std::vector<Tensor>& grads) {
    accumulate(grads, ia, Tensor(in_shape, g.data()));
  });
}

Var mean(Var a) {
  const auto& av = a.value();
  const double n = static_cast<double>(av.size());
  const double s = std::accumulate(av.data().begin(), av.data().end(), 0.0);
  Tape& tape = tape_of(a);
  const int ia = a.id;
  const auto in_shape = av.shape();
  return tape.record(Tensor::scalar(s / n), {ia}, [ia, in_shape, n](const Tensor& g, std::vector<Tensor>& grads) {
    accumulate(grads, ia, Tensor(in_shape, g[0] / n));
  });
}

Var sum(Var a) {
  const auto& av = a.value();
  const double s = std::accumulate(av.data().begin(), av.data().end(), 0.0);
  Tape& tape = tape_of(a);
  const int ia = a.id;
  const auto in_shape = av.shape();
  return tape.record(Tensor::scalar(s), {ia}, [ia, in_shape](const Tensor& g, std::vector<Tensor>& grads) {
    accumulate(grads, ia, Tensor(in_shape, g[0]));
  });
}

Var channel_affine(Var x, Var alpha, Var beta) {
  same_tape(x, alpha);
  same_tape(x, beta);
  const auto& xv = x.value();
  const auto& av = alpha.value();
  const auto& bv = beta.value();
  require(xv.rank() == 3, ErrorCode::ShapeMismatch, "channel_affine input must be CxHxW");
  const int c = xv.dim(0);
  require(av.size() == static_cast<std::size_t>(c) && bv.size() == static_cast<std::size_t>(c), ErrorCode::ShapeMismatch,
          "channel_affine: alpha/beta length must equal channel count " + std::to_string(c));
  const std::size_t plane = xv.size() / static_cast<std::size_t>(c);
  Tensor out(xv.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double a = av[static_cast<std::size_t>(ch)];
    const double b = bv[static_cast<std::size_t>(ch)];
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] = a * xv[ch * plane + p] + b;
  }
  check_finite(out, "channel_affine");
  Tape& tape = tape_of(x);
  const int ix = x.id;
  const int ia = alpha.id;
  const int ib = beta.id;
  return tape.record(std::move(out), {ix, ia, ib}, [&tape, ix, ia, ib, c, plane](const Tensor& g, std::vector<Tensor>& grads) {
    const auto& xv = tape.value(ix);
    const auto& av = tape.value(ia);
    Tensor gx(xv.shape());
    Tensor ga(av.shape());
    Tensor gb(tape.value(ib).shape());
    for (int ch = 0; ch < c; ++ch) {
      const double a = av[static_cast<std::size_t>(ch)];
      double sa = 0.0;
      double sb = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        const double gv = g[ch * plane + p];
        gx[ch * plane + p] = a * gv;
        sa += gv * xv[ch * plane + p];
        sb += gv;
      }
      ga[static_cast<std::size_t>(ch)] = sa;
      gb[static_cast<std::size_t>(ch)] = sb;
    }
    accumulate(grads, ix, gx);
    accumulate(grads, ia, ga);
    accumulate(grads, ib, gb);
  });
}

Var slice_cols(Var a, int begin, int count) {
  const auto& av = a.value();
  require(av.rank() == 2, ErrorCode::ShapeMismatch, "slice_cols expects a rank-2 tensor");
  const int rows = av.dim(0);
  const int cols = av.dim(1);
  require(begin >= 0 && count >= 0 && begin + count <= cols, ErrorCode::IndexOutOfRange, "slice_cols range out of bounds");
  Tensor out({rows, count});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < count; ++c)
      out[static_cast<std::size_t>(r) * count + c] = av[static_cast<std::size_t>(r) * cols + begin + c];
  Tape& tape = tape_of(a);
  const int ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, rows, cols, begin, count](const Tensor& g, std::vector<Tensor>& grads) {
    Tensor ga({rows, cols});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < count; ++c)
        ga[static_cast<std::size_t>(r) * cols + begin + c] = g[static_cast<std::size_t>(r) * count + c];
    accumulate(grads, ia, ga);
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::EmptySet, "concat_cols needs at least one part");
  const int rows = parts.front().value().dim(0);
  int cols = 0;
  std::vector<int> ids;
  std::vector<int> widths;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    const auto& v = p.value();
    require(v.rank() == 2 && v.dim(0) == rows, ErrorCode::ShapeMismatch, "concat_cols: row count mismatch");
    ids.push_back(p.id);
    widths.push_back(v.dim(1));
    cols += v.dim(1);
  }
  Tensor out({rows, cols});
  int off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const int w = v.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) out[static_cast<std::size_t>(r) * cols + off + c] = v[static_cast<std::size_t>(r) * w + c];
    off += w;
  }
  Tape& tape = tape_of(parts.front());
  return tape.record(std::move(out), ids, [ids, widths, rows, cols](const Tensor& g, std::vector<Tensor>& grads) {
    int off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const int w = widths[k];
      Tensor gp({rows, w});
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c) gp[static_cast<std::size_t>(r) * w + c] = g[static_cast<std::size_t>(r) * cols + off + c];
      accumulate(grads, ids[k], gp);
      off += w;
    }
  });
}

Var dot(Var a, Var b) {
  same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.size() == bv.size(), ErrorCode::ShapeMismatch, "dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  Tape& tape = tape_of(a);
  const int ia = a.id;
  const int ib = b.id;
  return tape.record(Tensor::scalar(s), {ia, ib}, [&tape, ia, ib](const Tensor& g, std::vector<Tensor>& grads) {
    const auto& av = tape.value(ia);
    const auto& bv = tape.value(ib);
    Tensor ga(av.shape());
    Tensor gb(bv.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
      ga[i] = g[0] * bv[i];
      gb[i] = g[0] * av[i];
    }
    accumulate(grads, ia, ga);
    accumulate(grads, ib, gb);
  });
}

CheckReport finite_diff_check(const GraphFn& graph, std::span<const NamedInput> inputs, double h, double tol) {
  auto evaluate = [&](const std::vector<Tensor>& values) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& v : values) leaves.push_back(tape.leaf(v));
    return graph(tape, leaves).value().item();
  };

  std::vector<Tensor> values;
  for (const auto& in : inputs) values.push_back(in.value);

  Tape tape;
  std::vector<Var> leaves;
  for (const auto& v : values) leaves.push_back(tape.leaf(v));
  const auto grads = tape.backward(graph(tape, leaves));

  CheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    CheckEntry entry{inputs[k].name, 0.0, true};
    const auto& analytic = grads.of(leaves[k]);
    for (std::size_t i = 0; i < values[k].size(); ++i) {
      const double orig = values[k][i];
      values[k][i] = orig + h;
      const double fp = evaluate(values);
      values[k][i] = orig - h;
      const double fm = evaluate(values);
      values[k][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    entry.pass = entry.max_rel_error <= tol;
    report.pass = report.pass && entry.pass;
    report.entries.push_back(entry);
  }
  return report;
}

void inject_fault(Fault f) { g_fault = f; }

Fault injected_fault() { return g_fault; }

}  // namespace physfed::ad
