// Copyright 2026 The Incepkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "incepkit/executor.hpp"

#include <cmath>

namespace incepkit {

std::vector<ParamInfo> parameter_manifest(const GraphSpec& graph) {
  ShapeMap shapes = infer_shapes(graph);
  std::vector<ParamInfo> manifest;
  for (std::int64_t idx : topo_order(graph)) {
    const NodeSpec& n = graph.nodes[static_cast<std::size_t>(idx)];
    switch (n.kind) {
      case NodeKind::Conv: {
        const ConvSpec& c = n.conv();
        std::int64_t cin = shapes.at(n.inputs[0]).c();
        manifest.push_back({n.id + "/w", n.id, "conv_weight",
                            Shape{c.kernel_h, c.kernel_w, cin, c.out_channels}, true});
        manifest.push_back({n.id + "/b", n.id, "conv_bias", Shape{c.out_channels}, true});
        break;
      }
      case NodeKind::BatchNorm: {
        std::int64_t ch = shapes.at(n.inputs[0]).c();
        manifest.push_back({n.id + "/gamma", n.id, "bn_gamma", Shape{ch}, true});
        manifest.push_back({n.id + "/beta", n.id, "bn_beta", Shape{ch}, true});
        manifest.push_back({n.id + "/running_mean", n.id, "bn_running_mean", Shape{ch}, false});
        manifest.push_back({n.id + "/running_var", n.id, "bn_running_var", Shape{ch}, false});
        break;
      }
      case NodeKind::FullyConnected: {
        std::int64_t in = shapes.at(n.inputs[0])[1];
        std::int64_t units = n.fully_connected().units;
        manifest.push_back({n.id + "/w", n.id, "fc_weight", Shape{in, units}, true});
        manifest.push_back({n.id + "/b", n.id, "fc_bias", Shape{units}, true});
        break;
      }
      default:
        break;
    }
  }
  return manifest;
}

template <typename T>
ParamStore<T> init_params(const GraphSpec& graph, std::uint64_t seed) {
  ParamStore<T> store;
  Rng rng(seed);
  for (const ParamInfo& p : parameter_manifest(graph)) {
    TensorT<T> t(p.shape);
    if (p.role == "conv_weight") {
      // fan_in = Kh * Kw * Cin
      double fan_in = static_cast<double>(p.shape[0] * p.shape[1] * p.shape[2]);
      double std = std::sqrt(2.0 / fan_in);
      for (auto& v : t.data) v = static_cast<T>(rng.normal() * std);
    } else if (p.role == "fc_weight") {
      double std = std::sqrt(2.0 / static_cast<double>(p.shape[0]));
      for (auto& v : t.data) v = static_cast<T>(rng.normal() * std);
    } else if (p.role == "bn_gamma" || p.role == "bn_running_var") {
      t.fill(T(1));
    }  // biases, beta, running_mean stay zero
    store.emplace(p.name, std::move(t));
  }
  return store;
}

namespace {

template <typename T>
const TensorT<T>& fetch(const ParamStore<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw BadInput("missing parameter: " + name);
  return it->second;
}

template <typename T>
void accumulate(TensorT<T>& into, const TensorT<T>& grad) {
  if (into.data.empty()) {
    into = grad;
    return;
  }
  for (std::size_t i = 0; i < into.data.size(); ++i) into.data[i] += grad.data[i];
}

template <typename T>
TensorT<T> vec_tensor(std::vector<T> v) {
  const std::int64_t n = static_cast<std::int64_t>(v.size());
  return TensorT<T>(Shape{n}, std::move(v));
}

}  // namespace

template <typename T>
Executor<T>::Executor(const GraphSpec& graph) : graph_(&graph) {
  order_ = topo_order(graph);
  for (std::size_t i = 0; i < graph.nodes.size(); ++i)
    index_.emplace(graph.nodes[i].id, static_cast<std::int64_t>(i));
  state_.resize(graph.nodes.size());
}

template <typename T>
const TensorT<T>& Executor<T>::forward(ParamStore<T>& params, const TensorT<T>& input, Mode mode,
                                       std::uint64_t seed) {
  const Shape& want = graph_->input_shape;
  if (input.shape.rank() != want.rank())
    throw BadInput("execute: input rank " + input.shape.str() + " does not match graph input " +
                   want.str());
  for (int i = 1; i < want.rank(); ++i)  // batch dim is free
    if (input.shape[i] != want[i])
      throw BadInput("execute: input " + input.shape.str() + " does not match graph input " +
                     want.str());

  last_mode_ = mode;
  has_forward_ = true;
  for (auto& s : state_) s = NodeState{};

  for (std::size_t oi = 0; oi < order_.size(); ++oi) {
    const std::int64_t idx = order_[oi];
    const NodeSpec& n = graph_->nodes[static_cast<std::size_t>(idx)];
    NodeState& st = state_[static_cast<std::size_t>(idx)];
    auto arg = [&](std::size_t i) -> const TensorT<T>& {
      return state_[static_cast<std::size_t>(index_.at(n.inputs[i]))].output;
    };
    switch (n.kind) {
      case NodeKind::Input:
        st.output = input;
        break;
      case NodeKind::Conv: {
        const TensorT<T>& w = fetch(params, n.id + "/w");
        const TensorT<T>& b = fetch(params, n.id + "/b");
        st.output = conv2d_forward(arg(0), w, std::span<const T>(b.data), n.conv());
        break;
      }
      case NodeKind::MaxPool:
      case NodeKind::AvgPool: {
        auto r = pool2d_forward(arg(0), n.pool());
        st.output = std::move(r.output);
        st.argmax = std::move(r.argmax);
        break;
      }
      case NodeKind::BatchNorm: {
        const auto& p = n.batchnorm();
        const TensorT<T>& gamma = fetch(params, n.id + "/gamma");
        const TensorT<T>& beta = fetch(params, n.id + "/beta");
        const TensorT<T>& rm = fetch(params, n.id + "/running_mean");
        const TensorT<T>& rv = fetch(params, n.id + "/running_var");
        auto r = batchnorm_forward<T>(arg(0), std::span<const T>(gamma.data),
                                      std::span<const T>(beta.data), std::span<const T>(rm.data),
                                      std::span<const T>(rv.data), static_cast<T>(p.epsilon),
                                      static_cast<T>(p.momentum), mode);
        st.output = std::move(r.output);
        st.xhat = std::move(r.xhat);
        st.inv_std = std::move(r.inv_std);
        if (mode == Mode::Train) {
          params.at(n.id + "/running_mean").data = std::move(r.new_running_mean);
          params.at(n.id + "/running_var").data = std::move(r.new_running_var);
        }
        break;
      }
      case NodeKind::ReLU:
        st.output = relu(arg(0));
        break;
      case NodeKind::Concat: {
        std::vector<const TensorT<T>*> ins;
        ins.reserve(n.inputs.size());
        for (std::size_t i = 0; i < n.inputs.size(); ++i) ins.push_back(&arg(i));
        st.output = concat_channels(ins);
        break;
      }
      case NodeKind::ResidualAdd:
        st.output = add_scaled(arg(0), arg(1), static_cast<T>(n.residual_add().alpha));
        break;
      case NodeKind::GlobalAvgPool:
        st.output = global_avgpool(arg(0));
        break;
      case NodeKind::Dropout: {
        auto r = dropout_forward(arg(0), static_cast<T>(n.dropout().keep), mode,
                                 mix_seed(seed, static_cast<std::uint64_t>(idx)));
        st.output = std::move(r.output);
        st.mask = std::move(r.mask);
        break;
      }
      case NodeKind::FullyConnected: {
        const TensorT<T>& w = fetch(params, n.id + "/w");
        const TensorT<T>& b = fetch(params, n.id + "/b");
        st.output = fully_connected(arg(0), w, std::span<const T>(b.data));
        break;
      }
      case NodeKind::Softmax:
        st.output = softmax(arg(0));
        break;
    }
  }
  return activation(graph_->output_id);
}

template <typename T>
const TensorT<T>& Executor<T>::activation(const std::string& id) const {
  if (!has_forward_) throw Error("executor: no forward pass recorded");
  auto it = index_.find(id);
  if (it == index_.end()) throw BadInput("no such node: " + id);
  return state_[static_cast<std::size_t>(it->second)].output;
}

template <typename T>
ParamStore<T> Executor<T>::backward(const ParamStore<T>& params, const std::string& at_node,
                                    const TensorT<T>& grad) {
  if (!has_forward_ || last_mode_ != Mode::Train)
    throw Error("executor: backward needs a Train-mode forward context");
  auto at = index_.find(at_node);
  if (at == index_.end()) throw BadInput("no such node: " + at_node);

  std::vector<TensorT<T>> node_grads(graph_->nodes.size());
  {
    const TensorT<T>& out = state_[static_cast<std::size_t>(at->second)].output;
    if (grad.shape != out.shape)
      throw BadInput("backward: seed gradient " + grad.shape.str() + " does not match node " +
                     at_node + " output " + out.shape.str());
    node_grads[static_cast<std::size_t>(at->second)] = grad;
  }

  ParamStore<T> grads;
  auto add_param_grad = [&](const std::string& name, TensorT<T> g) {
    auto it = grads.find(name);
    if (it == grads.end())
      grads.emplace(name, std::move(g));
    else
      accumulate(it->second, g);
  };

  input_grad_ = TensorT<T>();
  for (auto rit = order_.rbegin(); rit != order_.rend(); ++rit) {
    const std::int64_t idx = *rit;
    const NodeSpec& n = graph_->nodes[static_cast<std::size_t>(idx)];
    TensorT<T>& gy = node_grads[static_cast<std::size_t>(idx)];
    if (gy.data.empty()) continue;  // no gradient flows through this node
    NodeState& st = state_[static_cast<std::size_t>(idx)];
    auto arg = [&](std::size_t i) -> const TensorT<T>& {
      return state_[static_cast<std::size_t>(index_.at(n.inputs[i]))].output;
    };
    auto send = [&](std::size_t i, TensorT<T> g) {
      accumulate(node_grads[static_cast<std::size_t>(index_.at(n.inputs[i]))], g);
    };
    switch (n.kind) {
      case NodeKind::Input:
        accumulate(input_grad_, gy);
        break;
      case NodeKind::Conv: {
        const TensorT<T>& w = fetch(params, n.id + "/w");
        auto g = conv2d_backward(gy, arg(0), w, n.conv(),
                                 n.conv().activation == Activation::ReLU ? &st.output : nullptr);
        add_param_grad(n.id + "/w", std::move(g.weights));
        add_param_grad(n.id + "/b", vec_tensor(std::move(g.bias)));
        send(0, std::move(g.input));
        break;
      }
      case NodeKind::MaxPool:
      case NodeKind::AvgPool:
        send(0, pool2d_backward(gy, arg(0).shape, n.pool(), st.argmax));
        break;
      case NodeKind::BatchNorm: {
        const TensorT<T>& gamma = fetch(params, n.id + "/gamma");
        auto g = batchnorm_backward<T>(gy, st.xhat, std::span<const T>(st.inv_std),
                                       std::span<const T>(gamma.data), Mode::Train);
        add_param_grad(n.id + "/gamma", vec_tensor(std::move(g.gamma)));
        add_param_grad(n.id + "/beta", vec_tensor(std::move(g.beta)));
        send(0, std::move(g.input));
        break;
      }
      case NodeKind::ReLU:
        send(0, relu_backward(gy, st.output));
        break;
      case NodeKind::Concat: {
        std::int64_t offset = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          std::int64_t c = arg(i).shape.c();
          send(i, slice_channels(gy, offset, c));
          offset += c;
        }
        break;
      }
      case NodeKind::ResidualAdd: {
        send(0, gy);
        TensorT<T> scaled(gy.shape);
        const T alpha = static_cast<T>(n.residual_add().alpha);
        for (std::size_t i = 0; i < gy.data.size(); ++i) scaled.data[i] = alpha * gy.data[i];
        send(1, std::move(scaled));
        break;
      }
      case NodeKind::GlobalAvgPool:
        send(0, global_avgpool_backward(gy, arg(0).shape));
        break;
      case NodeKind::Dropout:
        send(0, dropout_backward(gy, st.mask, static_cast<T>(n.dropout().keep)));
        break;
      case NodeKind::FullyConnected: {
        const TensorT<T>& w = fetch(params, n.id + "/w");
        auto g = fully_connected_backward(gy, arg(0), w);
        add_param_grad(n.id + "/w", std::move(g.weights));
        add_param_grad(n.id + "/b", vec_tensor(std::move(g.bias)));
        send(0, std::move(g.input));
        break;
      }
      case NodeKind::Softmax:
        send(0, softmax_backward(gy, st.output));
        break;
    }
    if (n.kind != NodeKind::Input) gy = TensorT<T>();  // free as we go
  }
  return grads;
}

template <typename T>
const TensorT<T>& Executor<T>::input_gradient() const {
  return input_grad_;
}

template <typename T>
std::optional<std::string> Executor<T>::first_nonfinite_node() const {
  if (!has_forward_) return std::nullopt;
  for (std::int64_t idx : order_) {
    const auto& out = state_[static_cast<std::size_t>(idx)].output;
    for (const T& v : out.data)
      if (!std::isfinite(static_cast<double>(v)))
        return graph_->nodes[static_cast<std::size_t>(idx)].id;
  }
  return std::nullopt;
}

template class Executor<float>;
template class Executor<double>;
template ParamStore<float> init_params<float>(const GraphSpec&, std::uint64_t);
template ParamStore<double> init_params<double>(const GraphSpec&, std::uint64_t);

}  // namespace incepkit
