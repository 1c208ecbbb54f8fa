#include "maml/params.hpp"

#include <stdexcept>

namespace maml {

int ParamStore::add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
    entries_.push_back({name, std::move(value)});
    const int id = static_cast<int>(entries_.size()) - 1;
    index_[name] = id;
    return id;
}

int ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

size_t ParamStore::total_scalars() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
}

TapeParams lift_params(ad::Tape& tape, const ParamStore& store, bool requires_grad) {
    TapeParams tp;
    tp.values.reserve(static_cast<size_t>(store.count()));
    for (int i = 0; i < store.count(); ++i) tp.values.push_back(tape.leaf(store.at(i), requires_grad));
    return tp;
}

Tensor he_conv_init(std::mt19937_64& rng, int co, int ci, int k) {
    Tensor w({co, ci, k, k, k});
    const double fan_in = static_cast<double>(ci) * k * k * k;
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
    for (size_t i = 0; i < w.numel(); ++i) w[i] = n(rng);
    return w;
}

ConvRef add_conv(ParamStore& store, const std::string& name, int ci, int co, int k,
                 std::mt19937_64& rng) {
    ConvRef r;
    r.w = store.add(name + ".w", he_conv_init(rng, co, ci, k));
    r.b = store.add(name + ".b", Tensor({co}));
    return r;
}

}  // namespace maml
