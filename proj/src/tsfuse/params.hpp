#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tsfuse/autodiff.hpp"
#include "tsfuse/rng.hpp"
#include "tsfuse/tensor.hpp"

namespace tsfuse {

// Optimizer group a parameter belongs to; each group has its own learning rate.
enum class ParamGroup : std::uint8_t { kBackbone = 0, kTextMlp = 1, kProjection = 2 };

const char* group_name(ParamGroup group);

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kBackbone;
  Tensor value;
};

// Named trainable tensors in insertion order.
class ParameterSet {
 public:
  Parameter& add(std::string name, ParamGroup group, Tensor value);
  bool contains(std::string_view name) const;
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t element_count() const;
  std::size_t element_count_with_prefix(std::string_view prefix) const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.items_ == b.items_; }

 private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool operator==(const Parameter& a, const Parameter& b);

// Every parameter of a set registered as a leaf of one graph.
class BoundParams {
 public:
  BoundParams(Graph& graph, const ParameterSet& params, bool requires_grad = true);

  Var operator[](std::string_view name) const;
  // Gradients in the parameter set's order; valid after graph.backward().
  std::vector<Tensor> gradients() const;

 private:
  Graph* graph_;
  std::vector<Var> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

Tensor uniform_tensor(Shape shape, double bound, Rng& rng);

// y = x W^T + b, with W stored [out, in] and b [out].
Var linear(Graph& g, Var x, Var weight, Var bias);
Var linear(Graph& g, Var x, Var weight);

// Adds `prefix.weight` [out, in] and `prefix.bias` [out] with the
// uniform(+-1/sqrt(in)) initialization common to linear layers.
void add_linear(ParameterSet& params, const std::string& prefix, ParamGroup group, std::size_t in,
                std::size_t out, Rng& rng);

}  // namespace tsfuse
