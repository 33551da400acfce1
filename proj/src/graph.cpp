// SPDX-License-Identifier: Apache-2.0
#include "qlip/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "qlip/kernels.hpp"

namespace qlip {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::AddBias: return "add_bias";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Scale: return "scale";
    case Op::Gelu: return "gelu";
    case Op::Softmax: return "softmax";
    case Op::Attention: return "attention";
    case Op::LayerNorm: return "layer_norm";
    case Op::SumAll: return "sum";
    case Op::MeanAll: return "mean";
    case Op::CosineSimilarity: return "cosine_similarity";
    case Op::L2Norm: return "l2_norm";
    case Op::MeanAbs: return "mean_abs";
    case Op::MeanSquare: return "mean_square";
    case Op::Fourier: return "fourier";
    case Op::ConcatRows: return "concat_rows";
    case Op::SliceRows: return "slice_rows";
  }
  return "unknown";
}

GraphError::GraphError(std::size_t node, Op op, const std::string& what)
    : std::runtime_error("graph node " + std::to_string(node) + " (" +
                         std::string(op_name(op)) + "): " + what),
      node_(node),
      op_(op) {}

namespace {

std::string dims(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

constexpr double kLayerNormEps = 1e-5;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

}  // namespace

// ---------------------------------------------------------------------------
// Construction

NodeId Graph::push(Node n) {
  for (auto i : n.inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

const Graph::Node& Graph::checked(NodeId id, Op consumer) const {
  if (id.index >= nodes_.size()) {
    throw GraphError(nodes_.size(), consumer, "operand refers to a node that does not exist");
  }
  return nodes_[id.index];
}

NodeId Graph::input(std::string name, std::size_t rows, std::size_t cols, bool requires_grad) {
  if (sources_.contains(name)) {
    throw GraphError(nodes_.size(), Op::Input, "duplicate source name '" + name + "'");
  }
  Node n{.op = Op::Input, .rows = rows, .cols = cols, .name = name, .trainable = requires_grad};
  n.needs_grad = requires_grad;
  auto id = push(std::move(n));
  sources_.emplace(std::move(name), id);
  return id;
}

NodeId Graph::param(std::string name, std::size_t rows, std::size_t cols, bool trainable) {
  if (auto it = sources_.find(name); it != sources_.end()) {
    const Node& existing = nodes_[it->second.index];
    if (existing.op != Op::Param || existing.rows != rows || existing.cols != cols ||
        existing.trainable != trainable) {
      throw GraphError(it->second.index, Op::Param,
                       "parameter '" + name + "' redeclared with a different signature");
    }
    return it->second;
  }
  Node n{.op = Op::Param, .rows = rows, .cols = cols, .name = name, .trainable = trainable};
  n.needs_grad = trainable;
  auto id = push(std::move(n));
  sources_.emplace(std::move(name), id);
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId w) {
  const auto& x = checked(a, Op::MatMul);
  const auto& y = checked(w, Op::MatMul);
  if (x.cols != y.rows) {
    throw GraphError(nodes_.size(), Op::MatMul,
                     "inner extents differ: " + dims(x.rows, x.cols) + " * " + dims(y.rows, y.cols));
  }
  return push({.op = Op::MatMul, .inputs = {a.index, w.index}, .rows = x.rows, .cols = y.cols});
}

NodeId Graph::add_bias(NodeId a, NodeId bias) {
  const auto& x = checked(a, Op::AddBias);
  const auto& b = checked(bias, Op::AddBias);
  if (b.rows != 1 || b.cols != x.cols) {
    throw GraphError(nodes_.size(), Op::AddBias,
                     "bias " + dims(b.rows, b.cols) + " does not fit " + dims(x.rows, x.cols));
  }
  return push({.op = Op::AddBias, .inputs = {a.index, bias.index}, .rows = x.rows, .cols = x.cols});
}

NodeId Graph::add(NodeId a, NodeId b) {
  const auto& x = checked(a, Op::Add);
  const auto& y = checked(b, Op::Add);
  if (x.rows != y.rows || x.cols != y.cols) {
    throw GraphError(nodes_.size(), Op::Add,
                     "shape mismatch " + dims(x.rows, x.cols) + " vs " + dims(y.rows, y.cols));
  }
  return push({.op = Op::Add, .inputs = {a.index, b.index}, .rows = x.rows, .cols = x.cols});
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const auto& x = checked(a, Op::Sub);
  const auto& y = checked(b, Op::Sub);
  if (x.rows != y.rows || x.cols != y.cols) {
    throw GraphError(nodes_.size(), Op::Sub,
                     "shape mismatch " + dims(x.rows, x.cols) + " vs " + dims(y.rows, y.cols));
  }
  return push({.op = Op::Sub, .inputs = {a.index, b.index}, .rows = x.rows, .cols = x.cols});
}

NodeId Graph::scale(NodeId a, double factor) {
  const auto& x = checked(a, Op::Scale);
  return push({.op = Op::Scale, .inputs = {a.index}, .rows = x.rows, .cols = x.cols, .scalar = factor});
}

NodeId Graph::gelu(NodeId a) {
  const auto& x = checked(a, Op::Gelu);
  return push({.op = Op::Gelu, .inputs = {a.index}, .rows = x.rows, .cols = x.cols});
}

NodeId Graph::softmax(NodeId a) {
  const auto& x = checked(a, Op::Softmax);
  return push({.op = Op::Softmax, .inputs = {a.index}, .rows = x.rows, .cols = x.cols});
}

NodeId Graph::attention(NodeId q, NodeId k, NodeId v, std::size_t heads) {
  const auto& nq = checked(q, Op::Attention);
  const auto& nk = checked(k, Op::Attention);
  const auto& nv = checked(v, Op::Attention);
  if (heads == 0 || nq.cols % heads != 0) {
    throw GraphError(nodes_.size(), Op::Attention,
                     "width " + std::to_string(nq.cols) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (nk.cols != nq.cols || nv.cols != nq.cols || nk.rows != nv.rows || nk.rows == 0) {
    throw GraphError(nodes_.size(), Op::Attention,
                     "q " + dims(nq.rows, nq.cols) + ", k " + dims(nk.rows, nk.cols) + ", v " +
                         dims(nv.rows, nv.cols) + " are inconsistent");
  }
  return push({.op = Op::Attention,
               .inputs = {q.index, k.index, v.index},
               .rows = nq.rows,
               .cols = nq.cols,
               .arg0 = heads});
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta) {
  const auto& nx = checked(x, Op::LayerNorm);
  const auto& g = checked(gamma, Op::LayerNorm);
  const auto& b = checked(beta, Op::LayerNorm);
  if (g.rows != 1 || b.rows != 1 || g.cols != nx.cols || b.cols != nx.cols) {
    throw GraphError(nodes_.size(), Op::LayerNorm, "gain/bias must be 1x" + std::to_string(nx.cols));
  }
  return push({.op = Op::LayerNorm,
               .inputs = {x.index, gamma.index, beta.index},
               .rows = nx.rows,
               .cols = nx.cols});
}

NodeId Graph::sum(NodeId a) {
  checked(a, Op::SumAll);
  return push({.op = Op::SumAll, .inputs = {a.index}, .rows = 1, .cols = 1});
}

NodeId Graph::mean(NodeId a) {
  checked(a, Op::MeanAll);
  return push({.op = Op::MeanAll, .inputs = {a.index}, .rows = 1, .cols = 1});
}

NodeId Graph::cosine_similarity(NodeId a, NodeId b) {
  const auto& x = checked(a, Op::CosineSimilarity);
  const auto& y = checked(b, Op::CosineSimilarity);
  if (x.rows != y.rows || x.cols != y.cols) {
    throw GraphError(nodes_.size(), Op::CosineSimilarity,
                     "shape mismatch " + dims(x.rows, x.cols) + " vs " + dims(y.rows, y.cols));
  }
  return push({.op = Op::CosineSimilarity, .inputs = {a.index, b.index}, .rows = 1, .cols = 1});
}

NodeId Graph::l2_norm(NodeId a) {
  checked(a, Op::L2Norm);
  return push({.op = Op::L2Norm, .inputs = {a.index}, .rows = 1, .cols = 1});
}

NodeId Graph::mean_abs(NodeId a) {
  checked(a, Op::MeanAbs);
  return push({.op = Op::MeanAbs, .inputs = {a.index}, .rows = 1, .cols = 1});
}

NodeId Graph::mean_square(NodeId a) {
  checked(a, Op::MeanSquare);
  return push({.op = Op::MeanSquare, .inputs = {a.index}, .rows = 1, .cols = 1});
}

NodeId Graph::fourier(NodeId coords, NodeId freqs) {
  const auto& c = checked(coords, Op::Fourier);
  const auto& f = checked(freqs, Op::Fourier);
  if (c.cols != 2 || f.rows != 2) {
    throw GraphError(nodes_.size(), Op::Fourier,
                     "expects n x 2 coordinates and 2 x f frequencies, got " + dims(c.rows, c.cols) +
                         " and " + dims(f.rows, f.cols));
  }
  return push({.op = Op::Fourier,
               .inputs = {coords.index, freqs.index},
               .rows = c.rows,
               .cols = 2 * f.cols});
}

NodeId Graph::concat_rows(NodeId a, NodeId b) {
  const auto& x = checked(a, Op::ConcatRows);
  const auto& y = checked(b, Op::ConcatRows);
  if (x.cols != y.cols) {
    throw GraphError(nodes_.size(), Op::ConcatRows,
                     "column counts differ: " + dims(x.rows, x.cols) + " vs " + dims(y.rows, y.cols));
  }
  return push({.op = Op::ConcatRows, .inputs = {a.index, b.index}, .rows = x.rows + y.rows, .cols = x.cols});
}

NodeId Graph::slice_rows(NodeId a, std::size_t begin, std::size_t end) {
  const auto& x = checked(a, Op::SliceRows);
  if (begin >= end || end > x.rows) {
    throw GraphError(nodes_.size(), Op::SliceRows,
                     "row range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + std::to_string(x.rows) + " rows");
  }
  return push({.op = Op::SliceRows,
               .inputs = {a.index},
               .rows = end - begin,
               .cols = x.cols,
               .arg0 = begin,
               .arg1 = end});
}

void Graph::mark_output(std::string name, NodeId node) {
  checked(node, Op::Input);
  outputs_[std::move(name)] = node;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : sources_) {
    if (nodes_[id.index].op == Op::Param) names.push_back(name);
  }
  return names;
}

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : sources_) {
    if (nodes_[id.index].op == Op::Input) names.push_back(name);
  }
  return names;
}

NodeId Graph::find(std::string_view name) const {
  if (auto it = sources_.find(name); it != sources_.end()) return it->second;
  if (auto it = outputs_.find(name); it != outputs_.end()) return it->second;
  throw std::out_of_range("graph has no node named '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Forward

const Tensor& Evaluation::output(std::string_view name) const {
  auto it = graph_->outputs().find(name);
  if (it == graph_->outputs().end()) {
    throw std::out_of_range("graph has no output named '" + std::string(name) + "'");
  }
  return values_[it->second.index];
}

TensorMap Evaluation::outputs() const {
  TensorMap out;
  for (const auto& [name, id] : graph_->outputs()) out.emplace(name, values_[id.index]);
  return out;
}

Feed make_feed(const TensorMap& tensors) {
  Feed feed;
  for (const auto& [name, t] : tensors) feed.emplace(name, &t);
  return feed;
}

namespace {

// Copies columns [c0, c0+w) of a row-major matrix.
Tensor take_cols(const Tensor& t, std::size_t c0, std::size_t w) {
  Tensor out = Tensor::zeros(t.rows(), w);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    std::copy_n(t.data() + r * t.cols() + c0, w, out.data() + r * w);
  }
  return out;
}

void put_cols(Tensor& t, const Tensor& part, std::size_t c0, bool accumulate) {
  const std::size_t w = part.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double* dst = t.data() + r * t.cols() + c0;
    const double* src = part.data() + r * w;
    for (std::size_t j = 0; j < w; ++j) dst[j] = accumulate ? dst[j] + src[j] : src[j];
  }
}

void softmax_rows_inplace(Tensor& t) {
  const std::size_t n = t.rows(), m = t.cols();
  const bool par = n * m >= kernels::kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (long long r = 0; r < static_cast<long long>(n); ++r) {
    double* row = t.data() + r * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < m; ++j) row[j] *= inv;
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

double dot_all(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Evaluation forward(const Graph& graph, const TensorMap& feed, Retain retain) {
  return forward(graph, make_feed(feed), retain);
}

Evaluation forward(const Graph& graph, const Feed& feed, Retain retain) {
  Evaluation ev;
  ev.graph_ = &graph;
  ev.retained_ = retain == Retain::All;
  const auto& nodes = graph.nodes();
  ev.values_.resize(nodes.size());
  ev.saved_.resize(nodes.size());

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    auto in = [&](std::size_t k) -> const Tensor& { return ev.values_[n.inputs[k]]; };
    Tensor out = Tensor::zeros(n.rows, n.cols);

    switch (n.op) {
      case Op::Input:
      case Op::Param: {
        auto it = feed.find(n.name);
        if (it == feed.end() || it->second == nullptr) {
          throw GraphError(i, n.op, "no tensor bound for '" + n.name + "'");
        }
        const Tensor& t = *it->second;
        if (t.rows() != n.rows || t.cols() != n.cols) {
          throw GraphError(i, n.op,
                           "'" + n.name + "' expects " + dims(n.rows, n.cols) + ", got " +
                               shape_string(t.shape()));
        }
        out = t.rank() == 2 ? t : t.reshaped({n.rows, n.cols});
        break;
      }
      case Op::MatMul: {
        const auto& a = in(0);
        kernels::matmul(a.values(), in(1).values(), out.values(), a.rows(), a.cols(), n.cols);
        break;
      }
      case Op::AddBias: {
        const auto& a = in(0);
        const auto& b = in(1);
        for (std::size_t r = 0; r < n.rows; ++r)
          for (std::size_t c = 0; c < n.cols; ++c) out(r, c) = a(r, c) + b[c];
        break;
      }
      case Op::Add:
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = in(0)[k] + in(1)[k];
        break;
      case Op::Sub:
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = in(0)[k] - in(1)[k];
        break;
      case Op::Scale:
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = in(0)[k] * n.scalar;
        break;
      case Op::Gelu:
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = gelu_value(in(0)[k]);
        break;
      case Op::Softmax:
        out = in(0);
        softmax_rows_inplace(out);
        break;
      case Op::Attention: {
        const auto& q = in(0);
        const auto& k = in(1);
        const auto& v = in(2);
        const std::size_t heads = n.arg0, dh = n.cols / heads, nq = q.rows(), nk = k.rows();
        const double s = 1.0 / std::sqrt(static_cast<double>(dh));
        Tensor probs_all;
        if (ev.retained_) probs_all = Tensor::zeros(heads * nq, nk);
        for (std::size_t h = 0; h < heads; ++h) {
          const Tensor qh = take_cols(q, h * dh, dh);
          const Tensor kh = take_cols(k, h * dh, dh);
          const Tensor vh = take_cols(v, h * dh, dh);
          Tensor scores = Tensor::zeros(nq, nk);
          kernels::matmul_bt(qh.values(), kh.values(), scores.values(), nq, dh, nk);
          for (auto& x : scores.values()) x *= s;
          softmax_rows_inplace(scores);
          Tensor oh = Tensor::zeros(nq, dh);
          kernels::matmul(scores.values(), vh.values(), oh.values(), nq, nk, dh);
          put_cols(out, oh, h * dh, false);
          if (ev.retained_) std::copy(scores.data(), scores.data() + scores.size(), probs_all.data() + h * nq * nk);
        }
        ev.saved_[i] = std::move(probs_all);
        break;
      }
      case Op::LayerNorm: {
        const auto& x = in(0);
        const auto& g = in(1);
        const auto& b = in(2);
        const std::size_t m = n.cols;
        Tensor xhat = Tensor::zeros(n.rows, m);
        Tensor rstd = Tensor::zeros(n.rows, 1);
        for (std::size_t r = 0; r < n.rows; ++r) {
          const double* row = x.data() + r * m;
          double mu = 0.0;
          for (std::size_t c = 0; c < m; ++c) mu += row[c];
          mu /= static_cast<double>(m);
          double var = 0.0;
          for (std::size_t c = 0; c < m; ++c) var += (row[c] - mu) * (row[c] - mu);
          var /= static_cast<double>(m);
          const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
          rstd[r] = rs;
          for (std::size_t c = 0; c < m; ++c) {
            xhat(r, c) = (row[c] - mu) * rs;
            out(r, c) = xhat(r, c) * g[c] + b[c];
          }
        }
        // xhat rows followed by one column of reciprocal std-devs.
        Tensor saved = Tensor::zeros(n.rows, m + 1);
        for (std::size_t r = 0; r < n.rows; ++r) {
          std::copy_n(xhat.data() + r * m, m, saved.data() + r * (m + 1));
          saved(r, m) = rstd[r];
        }
        ev.saved_[i] = std::move(saved);
        break;
      }
      case Op::SumAll: {
        double s = 0.0;
        for (double x : in(0).values()) s += x;
        out[0] = s;
        break;
      }
      case Op::MeanAll: {
        double s = 0.0;
        for (double x : in(0).values()) s += x;
        out[0] = s / static_cast<double>(in(0).size());
        break;
      }
      case Op::CosineSimilarity: {
        const auto& a = in(0);
        const auto& b = in(1);
        const double aa = dot_all(a, a), bb = dot_all(b, b);
        if (aa == 0.0 || bb == 0.0) throw GraphError(i, n.op, "zero-norm operand");
        // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): equal operands give exactly 1.
        out[0] = dot_all(a, b) / std::sqrt(aa * bb);
        break;
      }
      case Op::L2Norm:
        out[0] = std::sqrt(dot_all(in(0), in(0)));
        break;
      case Op::MeanAbs: {
        double s = 0.0;
        for (double x : in(0).values()) s += std::abs(x);
        out[0] = s / static_cast<double>(in(0).size());
        break;
      }
      case Op::MeanSquare: {
        double s = 0.0;
        for (double x : in(0).values()) s += x * x;
        out[0] = s / static_cast<double>(in(0).size());
        break;
      }
      case Op::Fourier: {
        const auto& c = in(0);
        const auto& f = in(1);
        const std::size_t nf = f.cols();
        Tensor z = Tensor::zeros(n.rows, nf);
        for (std::size_t r = 0; r < n.rows; ++r) {
          for (std::size_t j = 0; j < nf; ++j) {
            const double zz = kTwoPi * (c(r, 0) * f(0, j) + c(r, 1) * f(1, j));
            z(r, j) = zz;
            out(r, j) = std::sin(zz);
            out(r, nf + j) = std::cos(zz);
          }
        }
        ev.saved_[i] = std::move(z);
        break;
      }
      case Op::ConcatRows: {
        const auto& a = in(0);
        const auto& b = in(1);
        std::copy(a.data(), a.data() + a.size(), out.data());
        std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
        break;
      }
      case Op::SliceRows: {
        const auto& a = in(0);
        std::copy(a.data() + n.arg0 * n.cols, a.data() + n.arg1 * n.cols, out.data());
        break;
      }
    }
    ev.values_[i] = std::move(out);
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Backward

Gradients backward(const Graph& graph, const Evaluation& eval, NodeId loss,
                   std::span<const NodeId> watch) {
  const auto& nodes = graph.nodes();
  if (loss.index >= nodes.size()) throw std::out_of_range("backward: loss node out of range");
  const auto& ln = nodes[loss.index];
  if (ln.rows != 1 || ln.cols != 1) {
    throw GraphError(loss.index, ln.op, "loss must be scalar, got " + dims(ln.rows, ln.cols));
  }
  if (eval.graph_ != &graph) throw std::logic_error("backward: evaluation belongs to another graph");

  std::vector<Tensor> grad(nodes.size());
  std::vector<bool> has(nodes.size(), false);
  auto acc = [&](std::size_t k) -> Tensor& {
    if (!has[k]) {
      grad[k] = Tensor::zeros(nodes[k].rows, nodes[k].cols);
      has[k] = true;
    }
    return grad[k];
  };
  acc(loss.index)[0] = 1.0;

  std::vector<bool> watched(nodes.size(), false);
  for (auto w : watch) watched.at(w.index) = true;

  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!has[i]) continue;
    const auto& n = nodes[i];
    if (!n.needs_grad) continue;
    const Tensor& g = grad[i];
    auto val = [&](std::size_t k) -> const Tensor& { return eval.values_[n.inputs[k]]; };
    auto wants = [&](std::size_t k) { return nodes[n.inputs[k]].needs_grad; };

    switch (n.op) {
      case Op::Input:
      case Op::Param:
        break;
      case Op::MatMul: {
        const auto& a = val(0);
        const auto& w = val(1);
        const std::size_t rows = a.rows(), inner = a.cols(), m = n.cols;
        if (wants(0)) {
          Tensor da = Tensor::zeros(rows, inner);
          kernels::matmul_bt(g.values(), w.values(), da.values(), rows, m, inner);
          auto& t = acc(n.inputs[0]);
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += da[k];
        }
        if (wants(1)) kernels::matmul_at_acc(a.values(), g.values(), acc(n.inputs[1]).values(), rows, inner, m);
        break;
      }
      case Op::AddBias: {
        if (wants(0)) {
          auto& t = acc(n.inputs[0]);
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[k];
        }
        if (wants(1)) {
          auto& t = acc(n.inputs[1]);
          for (std::size_t r = 0; r < n.rows; ++r)
            for (std::size_t c = 0; c < n.cols; ++c) t[c] += g(r, c);
        }
        break;
      }
      case Op::Add:
      case Op::Sub: {
        if (wants(0)) {
          auto& t = acc(n.inputs[0]);
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[k];
        }
        if (wants(1)) {
          auto& t = acc(n.inputs[1]);
          const double sign = n.op == Op::Add ? 1.0 : -1.0;
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += sign * g[k];
        }
        break;
      }
      case Op::Scale: {
        auto& t = acc(n.inputs[0]);
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += n.scalar * g[k];
        break;
      }
      case Op::Gelu: {
        const auto& x = val(0);
        auto& t = acc(n.inputs[0]);
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[k] * gelu_slope(x[k]);
        break;
      }
      case Op::Softmax: {
        const auto& y = eval.values_[i];
        auto& t = acc(n.inputs[0]);
        for (std::size_t r = 0; r < n.rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < n.cols; ++c) dot += g(r, c) * y(r, c);
          for (std::size_t c = 0; c < n.cols; ++c) t(r, c) += y(r, c) * (g(r, c) - dot);
        }
        break;
      }
      case Op::Attention: {
        if (!eval.retained_) {
          throw GraphError(i, n.op, "attention probabilities were not retained by forward()");
        }
        const auto& q = val(0);
        const auto& k = val(1);
        const auto& v = val(2);
        const Tensor& probs_all = eval.saved_[i];
        const std::size_t heads = n.arg0, dh = n.cols / heads, nq = q.rows(), nk = k.rows();
        const double s = 1.0 / std::sqrt(static_cast<double>(dh));
        for (std::size_t h = 0; h < heads; ++h) {
          const Tensor qh = take_cols(q, h * dh, dh);
          const Tensor kh = take_cols(k, h * dh, dh);
          const Tensor vh = take_cols(v, h * dh, dh);
          const Tensor gh = take_cols(g, h * dh, dh);
          Tensor p = Tensor::zeros(nq, nk);
          std::copy_n(probs_all.data() + h * nq * nk, nq * nk, p.data());

          if (wants(2)) {
            Tensor dv = Tensor::zeros(nk, dh);
            kernels::matmul_at_acc(p.values(), gh.values(), dv.values(), nq, nk, dh);
            put_cols(acc(n.inputs[2]), dv, h * dh, true);
          }
          if (!wants(0) && !wants(1)) continue;
          // dS = P * (dP - rowsum(dP * P)), scaled by s for the score map.
          Tensor ds = Tensor::zeros(nq, nk);
          kernels::matmul_bt(gh.values(), vh.values(), ds.values(), nq, dh, nk);
          for (std::size_t r = 0; r < nq; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < nk; ++c) dot += ds(r, c) * p(r, c);
            for (std::size_t c = 0; c < nk; ++c) ds(r, c) = s * p(r, c) * (ds(r, c) - dot);
          }
          if (wants(0)) {
            Tensor dq = Tensor::zeros(nq, dh);
            kernels::matmul(ds.values(), kh.values(), dq.values(), nq, nk, dh);
            put_cols(acc(n.inputs[0]), dq, h * dh, true);
          }
          if (wants(1)) {
            Tensor dk = Tensor::zeros(nk, dh);
            kernels::matmul_at_acc(ds.values(), qh.values(), dk.values(), nq, nk, dh);
            put_cols(acc(n.inputs[1]), dk, h * dh, true);
          }
        }
        break;
      }
      case Op::LayerNorm: {
        const auto& gamma = val(1);
        const Tensor& saved = eval.saved_[i];
        const std::size_t m = n.cols;
        if (wants(1) || wants(2)) {
          Tensor dg = Tensor::zeros(1, m), db = Tensor::zeros(1, m);
          for (std::size_t r = 0; r < n.rows; ++r) {
            for (std::size_t c = 0; c < m; ++c) {
              dg[c] += g(r, c) * saved(r, c);
              db[c] += g(r, c);
            }
          }
          if (wants(1)) {
            auto& t = acc(n.inputs[1]);
            for (std::size_t c = 0; c < m; ++c) t[c] += dg[c];
          }
          if (wants(2)) {
            auto& t = acc(n.inputs[2]);
            for (std::size_t c = 0; c < m; ++c) t[c] += db[c];
          }
        }
        if (wants(0)) {
          auto& t = acc(n.inputs[0]);
          std::vector<double> dxhat(m);
          for (std::size_t r = 0; r < n.rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
              dxhat[c] = g(r, c) * gamma[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * saved(r, c);
            }
            mean_d /= static_cast<double>(m);
            mean_dx /= static_cast<double>(m);
            const double rs = saved(r, m);
            for (std::size_t c = 0; c < m; ++c) {
              t(r, c) += rs * (dxhat[c] - mean_d - saved(r, c) * mean_dx);
            }
          }
        }
        break;
      }
      case Op::SumAll: {
        auto& t = acc(n.inputs[0]);
        for (auto& x : t.values()) x += g[0];
        break;
      }
      case Op::MeanAll: {
        auto& t = acc(n.inputs[0]);
        const double w = g[0] / static_cast<double>(t.size());
        for (auto& x : t.values()) x += w;
        break;
      }
      case Op::CosineSimilarity: {
        const auto& a = val(0);
        const auto& b = val(1);
        const double aa = dot_all(a, a), bb = dot_all(b, b);
        const double denom = std::sqrt(aa * bb);
        const double cs = eval.values_[i][0];
        // d cs / da = b / denom - cs * a / |a|^2; exactly zero when a == b.
        if (wants(0)) {
          auto& t = acc(n.inputs[0]);
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[0] * (b[k] / denom - cs * a[k] / aa);
        }
        if (wants(1)) {
          auto& t = acc(n.inputs[1]);
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[0] * (a[k] / denom - cs * b[k] / bb);
        }
        break;
      }
      case Op::L2Norm: {
        const double norm = eval.values_[i][0];
        if (norm == 0.0) break;  // subgradient 0 at the origin
        const auto& a = val(0);
        auto& t = acc(n.inputs[0]);
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[0] * a[k] / norm;
        break;
      }
      case Op::MeanAbs: {
        const auto& a = val(0);
        auto& t = acc(n.inputs[0]);
        const double w = g[0] / static_cast<double>(t.size());
        for (std::size_t k = 0; k < t.size(); ++k) {
          t[k] += a[k] > 0.0 ? w : (a[k] < 0.0 ? -w : 0.0);
        }
        break;
      }
      case Op::MeanSquare: {
        const auto& a = val(0);
        auto& t = acc(n.inputs[0]);
        const double w = 2.0 * g[0] / static_cast<double>(t.size());
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += w * a[k];
        break;
      }
      case Op::Fourier: {
        const auto& c = val(0);
        const auto& f = val(1);
        const Tensor& z = eval.saved_[i];
        const std::size_t nf = f.cols();
        Tensor dz = Tensor::zeros(n.rows, nf);
        for (std::size_t r = 0; r < n.rows; ++r) {
          for (std::size_t j = 0; j < nf; ++j) {
            dz(r, j) = kTwoPi * (g(r, j) * std::cos(z(r, j)) - g(r, nf + j) * std::sin(z(r, j)));
          }
        }
        if (wants(0)) {
          auto& t = acc(n.inputs[0]);
          for (std::size_t r = 0; r < n.rows; ++r) {
            for (std::size_t j = 0; j < nf; ++j) {
              t(r, 0) += dz(r, j) * f(0, j);
              t(r, 1) += dz(r, j) * f(1, j);
            }
          }
        }
        if (wants(1)) kernels::matmul_at_acc(c.values(), dz.values(), acc(n.inputs[1]).values(), n.rows, 2, nf);
        break;
      }
      case Op::ConcatRows: {
        const std::size_t split = nodes[n.inputs[0]].rows * n.cols;
        if (wants(0)) {
          auto& t = acc(n.inputs[0]);
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[k];
        }
        if (wants(1)) {
          auto& t = acc(n.inputs[1]);
          for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[split + k];
        }
        break;
      }
      case Op::SliceRows: {
        auto& t = acc(n.inputs[0]);
        const std::size_t off = n.arg0 * n.cols;
        for (std::size_t k = 0; k < g.size(); ++k) t[off + k] += g[k];
        break;
      }
    }
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if ((n.op == Op::Param || n.op == Op::Input) && n.trainable) {
      Tensor t = has[i] ? grad[i] : Tensor::zeros(n.rows, n.cols);
      (n.op == Op::Param ? out.params : out.inputs).emplace(n.name, std::move(t));
    }
    if (watched[i]) out.watched.emplace(i, has[i] ? grad[i] : Tensor::zeros(n.rows, n.cols));
  }
  return out;
}

}  // namespace qlip
