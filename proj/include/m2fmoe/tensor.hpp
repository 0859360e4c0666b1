#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2fmoe {

// Error categories; the CLI maps these onto exit codes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Counter-based generator: output depends only on (seed, stream, counter),
// so every consumer draws from its own named stream and replays exactly.
class Rng {
public:
    Rng(uint64_t seed, const std::string& stream);
    Rng(uint64_t seed, uint64_t stream);

    uint64_t next_u64();
    double uniform();                        // [0, 1)
    double uniform(double lo, double hi);
    double normal();                         // standard normal
    // Fisher-Yates permutation of 0..n-1
    std::vector<int64_t> permutation(int64_t n);

    static uint64_t hash_name(const std::string& name);

private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_ = 0;
};

// Dense row-major tensor, 1-4 dims, doubles throughout. `node` is the tape
// handle when the value participates in a recorded computation.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;
    int node = -1;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s, double fill = 0.0);
    static Tensor from(std::vector<int64_t> s, std::vector<double> vals);
    static Tensor scalar(double x) { return from({1}, {x}); }

    int64_t numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    double& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return v[static_cast<size_t>(i)]; }
    double& at2(int64_t i, int64_t j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
    double at2(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }
    double item() const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

std::string shape_str(const std::vector<int64_t>& s);

// Split real/imag pair, row-major, shapes always equal.
struct ComplexTensor {
    std::vector<int64_t> shape;
    std::vector<double> re, im;

    ComplexTensor() = default;
    explicit ComplexTensor(std::vector<int64_t> s);
    int64_t numel() const;
};

enum class Padding { Same, Valid };

// Running statistics owned by the model, updated by batch_norm in training
// mode and read in eval mode.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;

    void init(int64_t features);
    int64_t features() const { return static_cast<int64_t>(running_mean.size()); }
};

enum class Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine,      // k*x + c
    Relu,
    Sigmoid,
    Sqrt,
    Log,
    Softmax,
    Matmul,
    Transpose,
    Conv1d,
    Conv2d,
    ScaleAxis,
    AddVec,
    Pick,
    Concat0,
    ConcatCols,
    Slice0,
    Reshape,
    Cumsum,
    BatchNorm,
    Dropout,
    ReduceSum,
    ReduceMean,
    ReduceSumAxis,
    ReduceMeanAxis,
    L2Norm,
    IrfftCols,
    // fused conv(3x3)+bias+ReLU+dropout+conv(3x3)+bias; one node instead of
    // six keeps the hot wavelet expert path off the allocator
    ConvBlock3x3,
};

struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    std::vector<int64_t> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    // saved forward context (op-specific)
    std::vector<double> ctx;
    std::vector<int64_t> ictx;
};

// Recorded computation; topologically ordered by construction. One tape per
// logical execution context, cleared between training steps.
class Tape {
public:
    int add_node(Node n);
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    const std::vector<double>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const std::vector<double>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

private:
    std::vector<Node> nodes_;
};

// --- tape entry points -------------------------------------------------

Tensor leaf(Tape& t, const Tensor& value, bool requires_grad = true);
Tensor constant(Tape& t, const Tensor& value);

Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor divide(Tape& t, const Tensor& a, const Tensor& b);
Tensor affine(Tape& t, const Tensor& x, double k, double c);
inline Tensor scale(Tape& t, const Tensor& x, double k) { return affine(t, x, k, 0.0); }
Tensor relu(Tape& t, const Tensor& x);
Tensor sigmoid(Tape& t, const Tensor& x);
Tensor sqrt_t(Tape& t, const Tensor& x);
Tensor log_t(Tape& t, const Tensor& x);
Tensor softmax(Tape& t, const Tensor& x, int axis);
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& t, const Tensor& a);
Tensor conv1d(Tape& t, const Tensor& x, const Tensor& kernel, Padding pad);
Tensor conv2d(Tape& t, const Tensor& x, const Tensor& kernel, Padding pad);
Tensor scale_axis(Tape& t, const Tensor& x, const Tensor& vec, int axis);
Tensor add_vec(Tape& t, const Tensor& x, const Tensor& vec, int axis);
Tensor pick(Tape& t, const Tensor& vec, int64_t index);
Tensor concat0(Tape& t, const std::vector<Tensor>& parts);
Tensor concat_cols(Tape& t, const Tensor& a, const Tensor& b);
Tensor slice0(Tape& t, const Tensor& x, int64_t start, int64_t len);
Tensor reshape(Tape& t, const Tensor& x, std::vector<int64_t> new_shape);
Tensor cumsum(Tape& t, const Tensor& x);
Tensor batch_norm(Tape& t, const Tensor& x, BatchNormState& state, bool training);
Tensor dropout(Tape& t, const Tensor& x, double rate, bool training, Rng& rng);
Tensor reduce_sum(Tape& t, const Tensor& x);
Tensor reduce_mean(Tape& t, const Tensor& x);
Tensor reduce_sum_axis(Tape& t, const Tensor& x, int axis);
Tensor reduce_mean_axis(Tape& t, const Tensor& x, int axis);
Tensor l2_norm(Tape& t, const Tensor& x);
// Inverse real FFT applied to each column of an [F, C] spectrum pair.
Tensor irfft_cols(Tape& t, const Tensor& re, const Tensor& im, int64_t n);
// k2 * dropout(relu(k1 * x + b1)) + b2 with 3x3 same-padded convolutions
Tensor conv_block_3x3(Tape& t, const Tensor& x, const Tensor& k1, const Tensor& b1,
                      const Tensor& k2, const Tensor& b2, double rate, bool training, Rng& rng);

// Reverse accumulation from a scalar root; fills grads of every reachable
// node that requires them.
void backward(Tape& t, const Tensor& root);

// --- parameter registry -------------------------------------------------

// Named learnable tensors plus non-learnable state (e.g. batch-norm running
// statistics), in deterministic insertion order.
class ParamRegistry {
public:
    Tensor& add(const std::string& name, Tensor init);
    Tensor& add_state(const std::string& name, Tensor init);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    const std::vector<std::string>& state_names() const { return state_order_; }
    int64_t count_parameters() const;

private:
    std::map<std::string, Tensor> values_;
    std::vector<std::string> order_;
    std::vector<std::string> state_order_;
};

// analytic-vs-central-difference comparison, one entry per parameter
struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool flagged = false;
};
struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst = 0.0;
    bool ok = true;
};

// `eval` recomputes the scalar loss from current parameter values; `grads`
// returns analytic gradients keyed by parameter name. Central differences
// with the given step are run per scalar parameter component.
GradCheckReport grad_check(ParamRegistry& params,
                           const std::function<double(const ParamRegistry&)>& eval,
                           const std::function<std::map<std::string, std::vector<double>>(
                               const ParamRegistry&)>& grads,
                           double step, double tolerance);

// uniform +-sqrt(1/fan_in) weight fill
void init_uniform(Tensor& w, int64_t fan_in, Rng& rng);

}  // namespace m2fmoe
