#include "tsfuse/params.hpp"

#include <cmath>

#include "tsfuse/error.hpp"

namespace tsfuse {

const char* group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kTextMlp: return "text_mlp";
    case ParamGroup::kProjection: return "projection";
  }
  return "unknown";
}

bool operator==(const Parameter& a, const Parameter& b) {
  return a.name == b.name && a.group == b.group && a.value == b.value;
}

Parameter& ParameterSet::add(std::string name, ParamGroup group, Tensor value) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, items_.size());
  items_.push_back(Parameter{std::move(name), group, std::move(value)});
  return items_.back();
}

bool ParameterSet::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Parameter& ParameterSet::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
  return items_[it->second];
}

const Parameter& ParameterSet::at(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->at(name);
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

std::size_t ParameterSet::element_count_with_prefix(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : items_)
    if (std::string_view(p.name).starts_with(prefix)) n += p.value.size();
  return n;
}

BoundParams::BoundParams(Graph& graph, const ParameterSet& params, bool requires_grad) : graph_(&graph) {
  vars_.reserve(params.size());
  for (const auto& p : params.items()) {
    index_.emplace(p.name, vars_.size());
    vars_.push_back(graph.leaf(p.value, requires_grad));
  }
}

Var BoundParams::operator[](std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("parameter '" + std::string(name) + "' is not bound");
  return vars_[it->second];
}

std::vector<Tensor> BoundParams::gradients() const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (Var v : vars_) out.push_back(graph_->grad(v));
  return out;
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data));
}

Var linear(Graph& g, Var x, Var weight, Var bias) { return g.add(linear(g, x, weight), bias); }

Var linear(Graph& g, Var x, Var weight) { return g.matmul(x, g.transpose(weight)); }

void add_linear(ParameterSet& params, const std::string& prefix, ParamGroup group, std::size_t in,
                std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  params.add(prefix + ".weight", group, uniform_tensor({out, in}, bound, rng));
  params.add(prefix + ".bias", group, uniform_tensor({out}, bound, rng));
}

}  // namespace tsfuse
