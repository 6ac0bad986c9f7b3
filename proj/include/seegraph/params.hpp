#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace seegraph {

/// Named learnable tensors plus their Adam moments. Insertion order is kept
/// so checkpoints and update sweeps are deterministic.
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
        Tensor first_moment;
        Tensor second_moment;
    };

    void add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        index_[name] = entries_.size();
        Tensor zeros(init.shape());
        entries_.push_back(Entry{name, std::move(init), zeros, zeros, zeros});
    }

    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    void add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Stream& stream) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Tensor t(std::move(shape));
        for (double& v : t.storage()) v = stream.next_uniform(-bound, bound);
        add(name, std::move(t));
    }

    void add_zeros(const std::string& name, Shape shape) { add(name, Tensor(std::move(shape))); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const noexcept { return entries_.size(); }

    Entry& entry(const std::string& name) { return entries_[lookup(name)]; }
    const Entry& entry(const std::string& name) const { return entries_[lookup(name)]; }
    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }

    std::vector<Entry>& entries() noexcept { return entries_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.grad.fill(0.0);
    }

    /// grad += weight * g, with g in store order (see ParameterBinding::gradients).
    void accumulate(const std::vector<Tensor>& grads, double weight) {
        if (grads.size() != entries_.size()) throw ShapeError("gradient list does not match the parameter store");
        for (std::size_t k = 0; k < entries_.size(); ++k) {
            Tensor& dst = entries_[k].grad;
            if (grads[k].shape() != dst.shape()) throw ShapeError("gradient shape mismatch for '" + entries_[k].name + "'");
            for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += weight * grads[k][i];
        }
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Binds store parameters as gradient leaves on one tape. Each name is bound
/// once per tape, so every use of a parameter shares a single leaf.
class ParameterBinding {
public:
    ParameterBinding(const ParameterStore& store, ad::Tape& tape, bool trainable)
        : store_(&store), tape_(&tape), trainable_(trainable) {}

    ad::Var operator[](const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const Tensor& v = store_->value(name);
        ad::Var var = trainable_ ? tape_->variable(v) : tape_->constant(v);
        bound_.emplace(name, var);
        return var;
    }

    /// d(loss)/d(param) for every store entry in store order; zeros for
    /// parameters this tape never touched.
    std::vector<Tensor> gradients() const {
        std::vector<Tensor> out;
        out.reserve(store_->size());
        for (const auto& e : store_->entries()) {
            auto it = bound_.find(e.name);
            out.push_back(it == bound_.end() ? Tensor(e.value.shape()) : tape_->grad(it->second));
        }
        return out;
    }

    const std::map<std::string, ad::Var>& bound() const noexcept { return bound_; }

private:
    const ParameterStore* store_;
    ad::Tape* tape_;
    bool trainable_;
    std::map<std::string, ad::Var> bound_;
};

/// Adam with bias-corrected moments.
class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParameterStore& store) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& e : store.entries()) {
            for (std::size_t i = 0; i < e.value.numel(); ++i) {
                const double g = e.grad[i];
                e.first_moment[i] = beta1_ * e.first_moment[i] + (1.0 - beta1_) * g;
                e.second_moment[i] = beta2_ * e.second_moment[i] + (1.0 - beta2_) * g * g;
                const double mhat = e.first_moment[i] / c1;
                const double vhat = e.second_moment[i] / c2;
                e.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    std::uint64_t steps() const noexcept { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Little-endian binary helpers shared by the checkpoint and recording formats.

namespace io {

template <class T>
void put(std::ostream& os, T v) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError(std::string("truncated while reading ") + what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void put_bytes(std::ostream& os, const std::string& s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }

inline std::string get_bytes(std::istream& is, std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError(std::string("truncated while reading ") + what);
    return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
    char got[4];
    if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace io

// ---------------------------------------------------------------------------
// Checkpoint: "SGWT", u16 version, then until EOF
// {u16 name length, name bytes, u8 rank, u32 dims..., f64 payload}.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(const ParameterStore& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write("SGWT", 4);
    io::put<std::uint16_t>(os, kCheckpointVersion);
    for (const auto& e : store.entries()) {
        io::put<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
        io::put_bytes(os, e.name);
        io::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.value.rank()));
        for (std::size_t d : e.value.shape()) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        for (double v : e.value.data()) io::put<double>(os, v);
    }
    if (!os) throw FormatError("write to '" + path + "' failed");
}

/// Reads every record of a checkpoint as (name, tensor) pairs in file order.
inline std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
    io::expect_magic(is, "SGWT");
    const auto version = io::get<std::uint16_t>(is, "version");
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    std::vector<std::pair<std::string, Tensor>> out;
    while (is.peek() != std::char_traits<char>::eof()) {
        const auto len = io::get<std::uint16_t>(is, "name length");
        std::string name = io::get_bytes(is, len, "name");
        const auto rank = io::get<std::uint8_t>(is, "rank");
        Shape shape(rank);
        for (auto& d : shape) d = io::get<std::uint32_t>(is, "dims");
        Tensor t(shape);
        for (double& v : t.storage()) v = io::get<double>(is, "payload");
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

/// Overwrites values of an initialized store. Names and shapes must match
/// exactly in both directions.
inline void load_checkpoint(ParameterStore& store, const std::string& path) {
    auto records = read_checkpoint(path);
    if (records.size() != store.size())
        throw FormatError("checkpoint holds " + std::to_string(records.size()) + " tensors, model expects " +
                          std::to_string(store.size()));
    for (auto& [name, t] : records) {
        if (!store.contains(name)) throw FormatError("checkpoint tensor '" + name + "' unknown to this model");
        Tensor& dst = store.value(name);
        if (dst.shape() != t.shape())
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                              shape_str(dst.shape()));
        dst = std::move(t);
    }
}

}  // namespace seegraph
