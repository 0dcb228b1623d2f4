#pragma once

// Dense tensors (rank <= 2, row-major, Eigen-backed) with tape-based reverse-mode
// differentiation. Every model equation is expressed with the free functions in ops.hpp.

#include <Eigen/Core>

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace palm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

/// Thrown when a forward op produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  [[nodiscard]] Graph<Scalar>& graph() const { return *graph_; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] bool valid() const { return graph_ != nullptr; }

  [[nodiscard]] const Matrix<Scalar>& value() const { return graph_->value(*this); }
  [[nodiscard]] Matrix<Scalar> grad() const { return graph_->grad(*this); }
  [[nodiscard]] bool requires_grad() const { return graph_->requires_grad(*this); }
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] std::vector<Index> shape() const { return {rows(), cols()}; }
  [[nodiscard]] Scalar item() const {
    if (rows() != 1 || cols() != 1) {
      throw std::invalid_argument("item() on non-scalar tensor");
    }
    return value()(0, 0);
  }

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

/// Records forward values and the closures needed to propagate gradients back.
///
/// Leaves are either owned (constant/variable) or reference externally owned storage
/// (parameter), so large weight matrices are never copied onto the tape. A graph is
/// meant to be used by one thread; independent graphs may share parameters read-only.
template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Mat&)>;

  explicit Graph(bool track_gradients = true) : tracking_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  [[nodiscard]] bool tracking() const { return tracking_; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  Tensor<Scalar> constant(Mat value) { return push_leaf(std::move(value), nullptr, false); }
  Tensor<Scalar> variable(Mat value) { return push_leaf(std::move(value), nullptr, tracking_); }
  /// The referenced matrix must outlive the graph and stay unmodified while it is in use.
  Tensor<Scalar> parameter(const Mat& value) { return push_leaf(Mat{}, &value, tracking_); }

  /// Appends the result of an op. `parents` decides whether the node needs a gradient;
  /// the closure receives the node's output gradient and accumulates into the parents.
  Tensor<Scalar> record(Mat value, std::initializer_list<Tensor<Scalar>> parents, BackwardFn fn,
                        const char* op) {
    if (!value.allFinite()) {
      throw NumericError(std::string("non-finite values produced by ") + op);
    }
    bool needs = false;
    if (tracking_) {
      for (const auto& p : parents) {
        needs = needs || nodes_[p.id()].requires_grad;
      }
    }
    Node node;
    node.owned = std::move(value);
    node.requires_grad = needs;
    node.leaf = false;
    if (needs) {
      node.backward = std::move(fn);
    }
    nodes_.push_back(std::move(node));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  [[nodiscard]] const Mat& value(const Tensor<Scalar>& t) const {
    const Node& n = nodes_[t.id()];
    return n.external != nullptr ? *n.external : n.owned;
  }

  [[nodiscard]] bool requires_grad(const Tensor<Scalar>& t) const {
    return nodes_[t.id()].requires_grad;
  }

  /// Gradient of the last backward() target with respect to `t`; zeros when `t` is not
  /// on any path to it.
  [[nodiscard]] Mat grad(const Tensor<Scalar>& t) const {
    const Node& n = nodes_[t.id()];
    if (n.grad.size() == 0) {
      const Mat& v = value(t);
      return Mat::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  /// Adds `delta` into the gradient of `t`, if `t` participates in differentiation.
  template <typename Derived>
  void accumulate(const Tensor<Scalar>& t, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[t.id()];
    if (!n.requires_grad) {
      return;
    }
    ensure_grad(t.id());
    n.grad += delta;
  }

  /// Mutable gradient buffer (allocated on demand). Used by ops with sparse updates.
  Mat& grad_buffer(const Tensor<Scalar>& t) {
    ensure_grad(t.id());
    return nodes_[t.id()].grad;
  }

  /// Propagates d(loss)/d(node) to every node. Leaf gradients accumulate across
  /// calls until zero_grad(); intermediate gradients are recomputed each call.
  void backward(const Tensor<Scalar>& loss) {
    if (!loss.valid() || &loss.graph() != this) {
      throw std::invalid_argument("backward: loss belongs to a different graph");
    }
    const Mat& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar (1x1) tensor");
    }
    if (!nodes_[loss.id()].requires_grad) {
      return;
    }
    for (auto& n : nodes_) {
      if (!n.leaf) {
        n.grad.resize(0, 0);
      }
    }
    ensure_grad(loss.id());
    nodes_[loss.id()].grad(0, 0) += Scalar(1);
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) {
        n.backward(*this, n.grad);
      }
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      n.grad.resize(0, 0);
    }
  }

 private:
  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    bool requires_grad = false;
    bool leaf = true;
    BackwardFn backward;
  };

  Tensor<Scalar> push_leaf(Mat value, const Mat* external, bool requires_grad) {
    if (external == nullptr && !value.allFinite()) {
      throw NumericError("non-finite values in leaf tensor");
    }
    Node node;
    node.owned = std::move(value);
    node.external = external;
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Mat& v = n.external != nullptr ? *n.external : n.owned;
      n.grad = Mat::Zero(v.rows(), v.cols());
    }
  }

  // deque: references to existing nodes survive push_back
  std::deque<Node> nodes_;
  bool tracking_;
};

}  // namespace palm
