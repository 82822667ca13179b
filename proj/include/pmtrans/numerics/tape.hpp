#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pmtrans/numerics/tensor.hpp"

namespace pmtrans {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t size() const { return value().size(); }
    float item() const { return value().item(); }
    bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode recording. Nodes are appended in evaluation order, so walking
/// them backwards is a valid topological order. A tape built with
/// record=false keeps forward values only (evaluation mode).
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr, nullptr, "constant"); }

    Var variable(Tensor value) { return push(std::move(value), record_, {}, nullptr, nullptr, "variable"); }

    /// Leaf bound to an external parameter. backward() accumulates the
    /// gradient into param.grad when param.requires_grad is set.
    Var bind(Tensor& param) {
        bool grad = record_ && param.requires_grad;
        return push(param, grad, {}, nullptr, grad ? &param : nullptr, "parameter");
    }

    /// Append the result of an op. `fn` is kept only if some parent needs a
    /// gradient.
    Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, const char* op) {
        bool grad = false;
        if (record_) {
            for (auto p : parents) grad = grad || nodes_[p].requires_grad;
        }
        if (!grad) {
            parents.clear();
            fn = nullptr;
        }
        return push(std::move(value), grad, std::move(parents), std::move(fn), nullptr, op);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Gradient buffer of a node; empty until backward reaches it.
    std::span<const float> grad(std::size_t id) const { return nodes_.at(id).grad; }
    std::span<const float> grad(Var v) const { return grad(v.id()); }

    /// Mutable gradient of a node, allocated on first touch. Ops use this to
    /// accumulate into their parents.
    std::span<float> grad_mut(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0f);
        return n.grad;
    }

    void backward(Var root) {
        const std::size_t r = root.id();
        if (nodes_.at(r).value.size() != 1) {
            throw DimensionError("backward root must be scalar, got shape " + shape_str(nodes_[r].value.shape));
        }
        if (!nodes_[r].requires_grad) return;
        grad_mut(r)[0] = 1.0f;
        for (std::size_t i = r + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            for (float g : n.grad) {
                if (!std::isfinite(g)) throw NumericError(std::string("non-finite gradient at op '") + n.op + "'");
            }
            if (n.backward) n.backward(*this, i);
            if (n.bound) {
                Tensor& p = *n.bound;
                if (!p.grad) p.grad.emplace(p.data.size(), 0.0f);
                for (std::size_t k = 0; k < n.grad.size(); ++k) (*p.grad)[k] += n.grad[k];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        Tensor* bound = nullptr;
        std::vector<float> grad;
        const char* op = "";
    };

    Var push(Tensor value, bool grad, std::vector<std::size_t> parents, BackwardFn fn, Tensor* bound, const char* op) {
        if (!value.all_finite()) {
            throw NumericError(std::string("non-finite value produced by '") + op + "' with shape " +
                               shape_str(value.shape));
        }
        value.requires_grad = false;
        value.grad.reset();
        nodes_.push_back(Node{std::move(value), grad, std::move(parents), std::move(fn), bound, {}, op});
        return Var(this, nodes_.size() - 1);
    }

    bool record_;
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace pmtrans
