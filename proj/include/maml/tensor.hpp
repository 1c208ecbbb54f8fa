#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace maml {

// Dense row-major tensor of doubles, rank 1..4. Layout convention throughout
// the project: rank-4 tensors are [channel][z][y][x] with x fastest, rank-3
// are [z][y][x].
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        v_.assign(count(shape_), 0.0);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double value) {
        Tensor t(std::move(shape));
        for (auto& x : t.v_) x = value;
        return t;
    }
    static Tensor scalar(double value) {
        Tensor t({1});
        t.v_[0] = value;
        return t;
    }
    static Tensor from(std::vector<int> shape, std::vector<double> data) {
        if (count(shape) != data.size())
            throw std::invalid_argument("Tensor::from: shape/data size mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.v_ = std::move(data);
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    size_t numel() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double& operator[](size_t i) { return v_[i]; }
    double operator[](size_t i) const { return v_[i]; }

    // rank-3 access
    double& at(int z, int y, int x) {
        return v_[(static_cast<size_t>(z) * shape_[1] + y) * shape_[2] + x];
    }
    double at(int z, int y, int x) const {
        return v_[(static_cast<size_t>(z) * shape_[1] + y) * shape_[2] + x];
    }
    // rank-4 access
    double& at(int c, int z, int y, int x) {
        return v_[((static_cast<size_t>(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }
    double at(int c, int z, int y, int x) const {
        return v_[((static_cast<size_t>(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }

    void fill(double value) {
        for (auto& x : v_) x = value;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // spatial voxel count for rank-3/rank-4 tensors
    size_t spatial() const {
        if (rank() == 3) return numel();
        if (rank() == 4)
            return static_cast<size_t>(shape_[1]) * shape_[2] * shape_[3];
        throw std::logic_error("Tensor::spatial: rank must be 3 or 4");
    }

    static size_t count(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dimension");
            n *= static_cast<size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

private:
    std::vector<int> shape_;
    std::vector<double> v_;
};

}  // namespace maml
