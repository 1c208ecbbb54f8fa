#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "maml/autodiff.hpp"
#include "maml/tensor.hpp"

namespace maml {

// Ordered, named collection of trainable tensors. Creation order is the
// canonical order used for optimizer state and checkpoint payloads.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
    };

    int add(const std::string& name, Tensor value);
    int find(const std::string& name) const;  // -1 when absent

    Tensor& at(int i) { return entries_[static_cast<size_t>(i)].value; }
    const Tensor& at(int i) const { return entries_[static_cast<size_t>(i)].value; }
    const std::string& name_of(int i) const { return entries_[static_cast<size_t>(i)].name; }

    int count() const { return static_cast<int>(entries_.size()); }
    size_t total_scalars() const;

private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
};

// All parameters mirrored onto a tape, index-aligned with the store.
struct TapeParams {
    std::vector<ad::Value> values;
};

TapeParams lift_params(ad::Tape& tape, const ParamStore& store, bool requires_grad);

// Conv weight initialization: zero-mean normal scaled by sqrt(2 / fan_in),
// suited to leaky-ReLU stacks.
Tensor he_conv_init(std::mt19937_64& rng, int co, int ci, int k);

// Parameter indices of one convolution.
struct ConvRef {
    int w = -1;
    int b = -1;
};

ConvRef add_conv(ParamStore& store, const std::string& name, int ci, int co, int k,
                 std::mt19937_64& rng);

}  // namespace maml
