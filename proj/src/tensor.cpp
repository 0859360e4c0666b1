#include "m2fmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "m2fmoe/spectral.hpp"

namespace m2fmoe {

namespace {

#if defined(__GLIBC__)
// Tape buffers are ~100KB and churn every training step; glibc's adaptive
// mmap/trim thresholds hand them back to the kernel each time, which costs
// more than the math. Pin the thresholds once.
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 64 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
    }
};
const MallocTuning malloc_tuning;
#endif

constexpr double kBnVarFloor = 1e-5;
constexpr double kPi = 3.14159265358979323846;

int64_t product(const std::vector<int64_t>& s) {
    int64_t p = 1;
    for (int64_t d : s) p *= d;
    return p;
}

uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void check_rank(const Tensor& x, const char* who) {
    if (x.rank() < 1 || x.rank() > 4)
        throw ShapeError(std::string(who) + ": tensors are limited to 1-4 dims, got rank " +
                         std::to_string(x.rank()));
}

}  // namespace

// --- Rng -----------------------------------------------------------------

uint64_t Rng::hash_name(const std::string& name) {
    uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Rng::Rng(uint64_t seed, const std::string& stream) : seed_(seed), stream_(hash_name(stream)) {}
Rng::Rng(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

uint64_t Rng::next_u64() {
    uint64_t v = mix64(seed_ ^ mix64(stream_ ^ mix64(counter_)));
    ++counter_;
    return v;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    // Box-Muller; u clamped away from 0
    double u = uniform();
    double v = uniform();
    if (u < 1e-300) u = 1e-300;
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * kPi * v);
}

std::vector<int64_t> Rng::permutation(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) {
        int64_t j = static_cast<int64_t>(next_u64() % static_cast<uint64_t>(i + 1));
        std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
    }
    return p;
}

void init_uniform(Tensor& w, int64_t fan_in, Rng& rng) {
    double bound = std::sqrt(1.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
    for (double& x : w.v) x = rng.uniform(-bound, bound);
}

// --- Tensor --------------------------------------------------------------

Tensor::Tensor(std::vector<int64_t> s, double fill) : shape(std::move(s)) {
    if (shape.empty() || shape.size() > 4)
        throw ShapeError("Tensor: 1-4 dims required, got " + shape_str(shape));
    for (int64_t d : shape)
        if (d <= 0) throw ShapeError("Tensor: nonpositive dim in " + shape_str(shape));
    v.assign(static_cast<size_t>(product(shape)), fill);
}

Tensor Tensor::from(std::vector<int64_t> s, std::vector<double> vals) {
    Tensor t;
    t.shape = std::move(s);
    if (t.shape.empty() || t.shape.size() > 4)
        throw ShapeError("Tensor: 1-4 dims required, got " + shape_str(t.shape));
    if (product(t.shape) != static_cast<int64_t>(vals.size()))
        throw ShapeError("Tensor: " + std::to_string(vals.size()) + " values for shape " +
                         shape_str(t.shape));
    t.v = std::move(vals);
    return t;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(v.size()); }

double Tensor::item() const {
    if (v.size() != 1) throw ShapeError("item: tensor has " + std::to_string(v.size()) + " values");
    return v[0];
}

std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

ComplexTensor::ComplexTensor(std::vector<int64_t> s) : shape(std::move(s)) {
    int64_t n = product(shape);
    re.assign(static_cast<size_t>(n), 0.0);
    im.assign(static_cast<size_t>(n), 0.0);
}

int64_t ComplexTensor::numel() const { return static_cast<int64_t>(re.size()); }

void BatchNormState::init(int64_t f) {
    running_mean.assign(static_cast<size_t>(f), 0.0);
    running_var.assign(static_cast<size_t>(f), 1.0);
}

// --- tape plumbing -------------------------------------------------------

int Tape::add_node(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
}

namespace {

int ensure_on_tape(Tape& t, const Tensor& x, bool requires_grad = false) {
    if (x.node >= 0) return x.node;
    Node n;
    n.op = Op::Leaf;
    n.shape = x.shape;
    n.value = x.v;
    n.requires_grad = requires_grad;
    return t.add_node(n);
}

Tensor wrap(Tape& t, int id) {
    Tensor out;
    out.shape = t.node(id).shape;
    out.v = t.node(id).value;
    out.node = id;
    return out;
}

int record(Tape& t, Op op, std::vector<int> inputs, std::vector<int64_t> shape,
           std::vector<double> value, std::vector<double> ctx = {},
           std::vector<int64_t> ictx = {}) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.ctx = std::move(ctx);
    n.ictx = std::move(ictx);
    n.requires_grad = false;
    for (int i : n.inputs)
        if (t.node(i).requires_grad) n.requires_grad = true;
    return t.add_node(n);
}

// x op y where either side may be a scalar [1]
enum class Bin { Add, Sub, Mul, Div };

void binary_shapes(const Tensor& a, const Tensor& b, const char* who) {
    if (a.same_shape(b) || a.numel() == 1 || b.numel() == 1) return;
    throw ShapeError(std::string(who) + ": incompatible shapes " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

}  // namespace

Tensor leaf(Tape& t, const Tensor& value, bool requires_grad) {
    check_rank(value, "leaf");
    Node n;
    n.op = Op::Leaf;
    n.shape = value.shape;
    n.value = value.v;
    n.requires_grad = requires_grad;
    return wrap(t, t.add_node(n));
}

Tensor constant(Tape& t, const Tensor& value) { return leaf(t, value, false); }

namespace {

Tensor binary(Tape& t, Bin kind, const Tensor& a, const Tensor& b, Op op, const char* who) {
    binary_shapes(a, b, who);
    int ia = ensure_on_tape(t, a);
    int ib = ensure_on_tape(t, b);
    const std::vector<int64_t>& shape = a.numel() >= b.numel() ? a.shape : b.shape;
    int64_t n = std::max(a.numel(), b.numel());
    std::vector<double> out(static_cast<size_t>(n));
    auto va = [&](int64_t i) { return a.numel() == 1 ? a.v[0] : a.v[static_cast<size_t>(i)]; };
    auto vb = [&](int64_t i) { return b.numel() == 1 ? b.v[0] : b.v[static_cast<size_t>(i)]; };
    for (int64_t i = 0; i < n; ++i) {
        double x = va(i), y = vb(i);
        switch (kind) {
            case Bin::Add: out[static_cast<size_t>(i)] = x + y; break;
            case Bin::Sub: out[static_cast<size_t>(i)] = x - y; break;
            case Bin::Mul: out[static_cast<size_t>(i)] = x * y; break;
            case Bin::Div: out[static_cast<size_t>(i)] = x / y; break;
        }
    }
    return wrap(t, record(t, op, {ia, ib}, shape, std::move(out)));
}

}  // namespace

Tensor add(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, Bin::Add, a, b, Op::Add, "add"); }
Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, Bin::Sub, a, b, Op::Sub, "sub"); }
Tensor mul(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, Bin::Mul, a, b, Op::Mul, "mul"); }
Tensor divide(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, Bin::Div, a, b, Op::Div, "divide"); }

Tensor affine(Tape& t, const Tensor& x, double k, double c) {
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) out[i] = k * x.v[i] + c;
    return wrap(t, record(t, Op::Affine, {ix}, x.shape, std::move(out), {k, c}));
}

Tensor relu(Tape& t, const Tensor& x) {
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) out[i] = x.v[i] > 0.0 ? x.v[i] : 0.0;
    return wrap(t, record(t, Op::Relu, {ix}, x.shape, std::move(out)));
}

Tensor sigmoid(Tape& t, const Tensor& x) {
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) {
        double v = x.v[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return wrap(t, record(t, Op::Sigmoid, {ix}, x.shape, std::move(out)));
}

Tensor sqrt_t(Tape& t, const Tensor& x) {
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) out[i] = std::sqrt(x.v[i]);
    return wrap(t, record(t, Op::Sqrt, {ix}, x.shape, std::move(out)));
}

Tensor log_t(Tape& t, const Tensor& x) {
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) out[i] = std::log(x.v[i]);
    return wrap(t, record(t, Op::Log, {ix}, x.shape, std::move(out)));
}

Tensor softmax(Tape& t, const Tensor& x, int axis) {
    if (x.rank() == 1) {
        if (axis != 0) throw ShapeError("softmax: axis " + std::to_string(axis) + " on rank-1 tensor");
    } else if (x.rank() == 2) {
        if (axis != 0 && axis != 1) throw ShapeError("softmax: invalid axis for rank-2 tensor");
    } else {
        throw ShapeError("softmax: rank-1 or rank-2 input required");
    }
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    int64_t rows = x.rank() == 2 ? x.shape[0] : 1;
    int64_t cols = x.rank() == 2 ? x.shape[1] : x.shape[0];
    bool along_cols = x.rank() == 1 || axis == 1;
    if (along_cols) {
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = x.v.data() + r * cols;
            double* or_ = out.data() + r * cols;
            double m = xr[0];
            for (int64_t c = 1; c < cols; ++c) m = std::max(m, xr[c]);
            double s = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
                or_[c] = std::exp(xr[c] - m);
                s += or_[c];
            }
            for (int64_t c = 0; c < cols; ++c) or_[c] /= s;
        }
    } else {
        for (int64_t c = 0; c < cols; ++c) {
            double m = x.v[static_cast<size_t>(c)];
            for (int64_t r = 1; r < rows; ++r) m = std::max(m, x.v[static_cast<size_t>(r * cols + c)]);
            double s = 0.0;
            for (int64_t r = 0; r < rows; ++r) {
                double e = std::exp(x.v[static_cast<size_t>(r * cols + c)] - m);
                out[static_cast<size_t>(r * cols + c)] = e;
                s += e;
            }
            for (int64_t r = 0; r < rows; ++r) out[static_cast<size_t>(r * cols + c)] /= s;
        }
    }
    return wrap(t, record(t, Op::Softmax, {ix}, x.shape, std::move(out), {}, {along_cols ? 1 : 0}));
}

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: rank-2 inputs required, got " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul: inner dims disagree, " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
    int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    int ia = ensure_on_tape(t, a);
    int ib = ensure_on_tape(t, b);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a.v.data() + i * k;
        double* orow = out.data() + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.v.data() + p * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return wrap(t, record(t, Op::Matmul, {ia, ib}, {m, n}, std::move(out)));
}

Tensor transpose(Tape& t, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: rank-2 input required");
    int ia = ensure_on_tape(t, a);
    int64_t r = a.shape[0], c = a.shape[1];
    std::vector<double> out(a.v.size());
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = a.v[static_cast<size_t>(i * c + j)];
    return wrap(t, record(t, Op::Transpose, {ia}, {c, r}, std::move(out)));
}

Tensor conv1d(Tape& t, const Tensor& x_in, const Tensor& k_in, Padding pad) {
    Tensor x = x_in, kernel = k_in;
    if (x.rank() == 1) x.shape = {1, x.shape[0]};
    if (kernel.rank() == 1) kernel.shape = {1, 1, kernel.shape[0]};
    if (x.rank() != 2 || kernel.rank() != 3)
        throw ShapeError("conv1d: expected x[Cin,L], kernel[Cout,Cin,k]");
    int64_t cin = x.shape[0], len = x.shape[1];
    int64_t cout = kernel.shape[0], kc = kernel.shape[1], kw = kernel.shape[2];
    if (kc != cin)
        throw ShapeError("conv1d: kernel channels " + std::to_string(kc) + " vs input " +
                         std::to_string(cin));
    int64_t pad_left = pad == Padding::Same ? (kw - 1) / 2 : 0;
    int64_t out_len = pad == Padding::Same ? len : len - kw + 1;
    if (out_len < 1)
        throw ShapeError("conv1d: kernel length " + std::to_string(kw) +
                         " exceeds padded input length " + std::to_string(len));
    x.node = x_in.node;
    kernel.node = k_in.node;
    int ix = ensure_on_tape(t, x);
    int ik = ensure_on_tape(t, kernel);
    std::vector<double> out(static_cast<size_t>(cout * out_len), 0.0);
    for (int64_t co = 0; co < cout; ++co)
        for (int64_t ci = 0; ci < cin; ++ci) {
            const double* xr = x.v.data() + ci * len;
            const double* kr = kernel.v.data() + (co * cin + ci) * kw;
            double* or_ = out.data() + co * out_len;
            for (int64_t p = 0; p < out_len; ++p) {
                double acc = 0.0;
                for (int64_t q = 0; q < kw; ++q) {
                    int64_t src = p + q - pad_left;
                    if (src >= 0 && src < len) acc += xr[src] * kr[q];
                }
                or_[p] += acc;
            }
        }
    return wrap(t, record(t, Op::Conv1d, {ix, ik}, {cout, out_len}, std::move(out), {},
                          {pad_left, len, kw, cin, cout}));
}

namespace {

// Single pass per output row with all nine taps accumulated in registers.
// `taps` is the 3x3 kernel laid out row-major; rows outside the image use a
// shared zero row so the interior loop stays branch-free.
void conv2d_3x3_rows(const double* __restrict rm, const double* __restrict r0,
                     const double* __restrict rp, const double* __restrict taps,
                     double* __restrict o, int64_t w, bool accumulate) {
    const double t0 = taps[0], t1 = taps[1], t2 = taps[2];
    const double t3 = taps[3], t4 = taps[4], t5 = taps[5];
    const double t6 = taps[6], t7 = taps[7], t8 = taps[8];
    double left = t1 * rm[0] + t2 * rm[1] + t4 * r0[0] + t5 * r0[1] + t7 * rp[0] + t8 * rp[1];
    double right = t0 * rm[w - 2] + t1 * rm[w - 1] + t3 * r0[w - 2] + t4 * r0[w - 1] +
                   t6 * rp[w - 2] + t7 * rp[w - 1];
    if (accumulate) {
        o[0] += left;
        for (int64_t xx = 1; xx + 1 < w; ++xx)
            o[xx] += t0 * rm[xx - 1] + t1 * rm[xx] + t2 * rm[xx + 1] + t3 * r0[xx - 1] +
                     t4 * r0[xx] + t5 * r0[xx + 1] + t6 * rp[xx - 1] + t7 * rp[xx] +
                     t8 * rp[xx + 1];
        o[w - 1] += right;
    } else {
        o[0] = left;
        for (int64_t xx = 1; xx + 1 < w; ++xx)
            o[xx] = t0 * rm[xx - 1] + t1 * rm[xx] + t2 * rm[xx + 1] + t3 * r0[xx - 1] +
                    t4 * r0[xx] + t5 * r0[xx + 1] + t6 * rp[xx - 1] + t7 * rp[xx] +
                    t8 * rp[xx + 1];
        o[w - 1] = right;
    }
}

void conv2d_3x3_forward(const double* __restrict x, const double* __restrict k,
                        double* __restrict out, int64_t cin, int64_t cout, int64_t h, int64_t w) {
    std::vector<double> zeros(static_cast<size_t>(w), 0.0);
    for (int64_t co = 0; co < cout; ++co) {
        double* oc = out + co * h * w;
        for (int64_t ci = 0; ci < cin; ++ci) {
            const double* kk = k + (co * cin + ci) * 9;
            const double* xc = x + ci * h * w;
            for (int64_t y = 0; y < h; ++y) {
                const double* rm = y > 0 ? xc + (y - 1) * w : zeros.data();
                const double* r0 = xc + y * w;
                const double* rp = y + 1 < h ? xc + (y + 1) * w : zeros.data();
                conv2d_3x3_rows(rm, r0, rp, kk, oc + y * w, w, ci > 0);
            }
        }
    }
}

// gradient w.r.t. the input: correlation of the upstream grad with the
// kernel flipped in both axes
void conv2d_3x3_backward_x(const double* __restrict g, const double* __restrict k,
                           double* __restrict gx, int64_t cin, int64_t cout, int64_t h, int64_t w) {
    std::vector<double> zeros(static_cast<size_t>(w), 0.0);
    for (int64_t ci = 0; ci < cin; ++ci) {
        double* gxc = gx + ci * h * w;
        for (int64_t co = 0; co < cout; ++co) {
            const double* kk = k + (co * cin + ci) * 9;
            double flipped[9];
            for (int q = 0; q < 9; ++q) flipped[q] = kk[8 - q];
            const double* gc = g + co * h * w;
            for (int64_t y = 0; y < h; ++y) {
                const double* rm = y > 0 ? gc + (y - 1) * w : zeros.data();
                const double* r0 = gc + y * w;
                const double* rp = y + 1 < h ? gc + (y + 1) * w : zeros.data();
                conv2d_3x3_rows(rm, r0, rp, flipped, gxc + y * w, w, co > 0);
            }
        }
    }
}

void conv2d_3x3_backward_k(const double* __restrict g, const double* __restrict x,
                           double* __restrict gk, int64_t cin, int64_t cout, int64_t h, int64_t w) {
    for (int64_t co = 0; co < cout; ++co)
        for (int64_t ci = 0; ci < cin; ++ci) {
            double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
            const double* gc = g + co * h * w;
            const double* xc = x + ci * h * w;
            for (int64_t y = 0; y < h; ++y) {
                const double* gr = gc + y * w;
                for (int64_t dy = 0; dy < 3; ++dy) {
                    int64_t sy = y + dy - 1;
                    if (sy < 0 || sy >= h) continue;
                    const double* xr = xc + sy * w;
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                    a1 += gr[0] * xr[0];
                    a2 += gr[0] * xr[1];
                    for (int64_t xx = 1; xx + 1 < w; ++xx) {
                        double gv = gr[xx];
                        a0 += gv * xr[xx - 1];
                        a1 += gv * xr[xx];
                        a2 += gv * xr[xx + 1];
                    }
                    a0 += gr[w - 1] * xr[w - 2];
                    a1 += gr[w - 1] * xr[w - 1];
                    acc[dy * 3 + 0] += a0;
                    acc[dy * 3 + 1] += a1;
                    acc[dy * 3 + 2] += a2;
                }
            }
            for (int q = 0; q < 9; ++q) gk[(co * cin + ci) * 9 + q] += acc[q];
        }
}

}  // namespace

Tensor conv2d(Tape& t, const Tensor& x, const Tensor& kernel, Padding pad) {
    if (x.rank() != 3 || kernel.rank() != 4)
        throw ShapeError("conv2d: expected x[Cin,H,W], kernel[Cout,Cin,kh,kw]");
    int64_t cin = x.shape[0], h = x.shape[1], w = x.shape[2];
    int64_t cout = kernel.shape[0], kci = kernel.shape[1], kh = kernel.shape[2], kw = kernel.shape[3];
    if (kci != cin) throw ShapeError("conv2d: kernel/input channel mismatch");
    if (pad != Padding::Same) throw ShapeError("conv2d: only same padding is supported");
    int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    int ix = ensure_on_tape(t, x);
    int ik = ensure_on_tape(t, kernel);
    std::vector<double> out(static_cast<size_t>(cout * h * w), 0.0);
    if (kh == 3 && kw == 3 && w >= 2) {
        conv2d_3x3_forward(x.v.data(), kernel.v.data(), out.data(), cin, cout, h, w);
    } else {
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t ci = 0; ci < cin; ++ci)
                for (int64_t dy = 0; dy < kh; ++dy)
                    for (int64_t dx = 0; dx < kw; ++dx) {
                        double kv = kernel.v[static_cast<size_t>(((co * cin + ci) * kh + dy) * kw + dx)];
                        if (kv == 0.0) continue;
                        for (int64_t y = 0; y < h; ++y) {
                            int64_t sy = y + dy - ph;
                            if (sy < 0 || sy >= h) continue;
                            const double* xr = x.v.data() + (ci * h + sy) * w;
                            double* or_ = out.data() + (co * h + y) * w;
                            int64_t x0 = std::max<int64_t>(0, pw - dx);
                            int64_t x1 = std::min(w, w + pw - dx);
                            const double* xs = xr + x0 + dx - pw;
                            for (int64_t xx = x0; xx < x1; ++xx) or_[xx] += kv * xs[xx - x0];
                        }
                    }
    }
    return wrap(t, record(t, Op::Conv2d, {ix, ik}, {cout, h, w}, std::move(out), {},
                          {ph, pw, cin, cout, h, w, kh, kw}));
}

namespace {

// axis views: treat tensor as [outer, axis_len, inner]
void axis_split(const std::vector<int64_t>& shape, int axis, int64_t& outer, int64_t& len,
                int64_t& inner) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    len = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace

Tensor scale_axis(Tape& t, const Tensor& x, const Tensor& vec, int axis) {
    int64_t outer, len, inner;
    axis_split(x.shape, axis, outer, len, inner);
    if (vec.rank() != 1 || vec.shape[0] != len)
        throw ShapeError("scale_axis: vector " + shape_str(vec.shape) + " vs axis length " +
                         std::to_string(len));
    int ix = ensure_on_tape(t, x);
    int iv = ensure_on_tape(t, vec);
    std::vector<double> out(x.v.size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < len; ++a) {
            double s = vec.v[static_cast<size_t>(a)];
            const double* src = x.v.data() + (o * len + a) * inner;
            double* dst = out.data() + (o * len + a) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] * s;
        }
    return wrap(t, record(t, Op::ScaleAxis, {ix, iv}, x.shape, std::move(out), {},
                          {static_cast<int64_t>(axis)}));
}

Tensor add_vec(Tape& t, const Tensor& x, const Tensor& vec, int axis) {
    int64_t outer, len, inner;
    axis_split(x.shape, axis, outer, len, inner);
    if (vec.rank() != 1 || vec.shape[0] != len)
        throw ShapeError("add_vec: vector " + shape_str(vec.shape) + " vs axis length " +
                         std::to_string(len));
    int ix = ensure_on_tape(t, x);
    int iv = ensure_on_tape(t, vec);
    std::vector<double> out(x.v.size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < len; ++a) {
            double s = vec.v[static_cast<size_t>(a)];
            const double* src = x.v.data() + (o * len + a) * inner;
            double* dst = out.data() + (o * len + a) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] + s;
        }
    return wrap(t, record(t, Op::AddVec, {ix, iv}, x.shape, std::move(out), {},
                          {static_cast<int64_t>(axis)}));
}

Tensor pick(Tape& t, const Tensor& vec, int64_t index) {
    if (vec.rank() != 1) throw ShapeError("pick: rank-1 input required");
    if (index < 0 || index >= vec.shape[0]) throw ShapeError("pick: index out of range");
    int iv = ensure_on_tape(t, vec);
    return wrap(t, record(t, Op::Pick, {iv}, {1}, {vec.v[static_cast<size_t>(index)]}, {}, {index}));
}

Tensor concat0(Tape& t, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no parts");
    std::vector<int> ids;
    std::vector<int64_t> ictx;
    int64_t total0 = 0;
    for (const Tensor& p : parts) {
        if (p.shape.size() != parts[0].shape.size())
            throw ShapeError("concat0: rank mismatch between parts");
        for (size_t d = 1; d < p.shape.size(); ++d)
            if (p.shape[d] != parts[0].shape[d]) throw ShapeError("concat0: trailing dims disagree");
        total0 += p.shape[0];
    }
    std::vector<int64_t> shape = parts[0].shape;
    shape[0] = total0;
    std::vector<double> out;
    out.reserve(static_cast<size_t>(product(shape)));
    for (const Tensor& p : parts) {
        ids.push_back(ensure_on_tape(t, p));
        ictx.push_back(p.numel());
        out.insert(out.end(), p.v.begin(), p.v.end());
    }
    return wrap(t, record(t, Op::Concat0, std::move(ids), std::move(shape), std::move(out), {},
                          std::move(ictx)));
}

Tensor concat_cols(Tape& t, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0])
        throw ShapeError("concat_cols: need matching row counts, got " + shape_str(a.shape) +
                         " and " + shape_str(b.shape));
    int ia = ensure_on_tape(t, a);
    int ib = ensure_on_tape(t, b);
    int64_t r = a.shape[0], ca = a.shape[1], cb = b.shape[1];
    std::vector<double> out(static_cast<size_t>(r * (ca + cb)));
    for (int64_t i = 0; i < r; ++i) {
        std::memcpy(out.data() + i * (ca + cb), a.v.data() + i * ca, sizeof(double) * static_cast<size_t>(ca));
        std::memcpy(out.data() + i * (ca + cb) + ca, b.v.data() + i * cb, sizeof(double) * static_cast<size_t>(cb));
    }
    return wrap(t, record(t, Op::ConcatCols, {ia, ib}, {r, ca + cb}, std::move(out), {}, {ca, cb}));
}

Tensor slice0(Tape& t, const Tensor& x, int64_t start, int64_t len) {
    if (start < 0 || len < 1 || start + len > x.shape[0]) throw ShapeError("slice0: out of range");
    int ix = ensure_on_tape(t, x);
    int64_t inner = x.numel() / x.shape[0];
    std::vector<int64_t> shape = x.shape;
    shape[0] = len;
    std::vector<double> out(x.v.begin() + start * inner, x.v.begin() + (start + len) * inner);
    return wrap(t, record(t, Op::Slice0, {ix}, std::move(shape), std::move(out), {}, {start, len, inner}));
}

Tensor reshape(Tape& t, const Tensor& x, std::vector<int64_t> new_shape) {
    if (product(new_shape) != x.numel())
        throw ShapeError("reshape: element counts differ, " + shape_str(x.shape) + " -> " +
                         shape_str(new_shape));
    int ix = ensure_on_tape(t, x);
    return wrap(t, record(t, Op::Reshape, {ix}, std::move(new_shape), x.v));
}

Tensor cumsum(Tape& t, const Tensor& x) {
    if (x.rank() != 1) throw ShapeError("cumsum: rank-1 input required");
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    double acc = 0.0;
    for (size_t i = 0; i < x.v.size(); ++i) {
        acc += x.v[i];
        out[i] = acc;
    }
    return wrap(t, record(t, Op::Cumsum, {ix}, x.shape, std::move(out)));
}

Tensor batch_norm(Tape& t, const Tensor& x, BatchNormState& state, bool training) {
    if (x.rank() != 2) throw ShapeError("batch_norm: rank-2 [B,F] input required");
    int64_t rows = x.shape[0], feats = x.shape[1];
    if (state.features() == 0) state.init(feats);
    if (state.features() != feats) throw ShapeError("batch_norm: state/feature width mismatch");
    if (training && rows < 2)
        throw ConfigError("batch_norm: training mode requires a batch of >= 2 rows");
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(x.v.size());
    // ctx layout: mean[F], var[F] (pre-floor), training flag in ictx
    std::vector<double> ctx(static_cast<size_t>(2 * feats));
    if (training) {
        for (int64_t f = 0; f < feats; ++f) {
            double m = 0.0;
            for (int64_t r = 0; r < rows; ++r) m += x.v[static_cast<size_t>(r * feats + f)];
            m /= static_cast<double>(rows);
            double var = 0.0;
            for (int64_t r = 0; r < rows; ++r) {
                double d = x.v[static_cast<size_t>(r * feats + f)] - m;
                var += d * d;
            }
            var /= static_cast<double>(rows);
            ctx[static_cast<size_t>(f)] = m;
            ctx[static_cast<size_t>(feats + f)] = var;
            double denom = std::sqrt(std::max(var, kBnVarFloor));
            for (int64_t r = 0; r < rows; ++r)
                out[static_cast<size_t>(r * feats + f)] =
                    (x.v[static_cast<size_t>(r * feats + f)] - m) / denom;
            state.running_mean[static_cast<size_t>(f)] =
                (1.0 - state.momentum) * state.running_mean[static_cast<size_t>(f)] + state.momentum * m;
            state.running_var[static_cast<size_t>(f)] =
                (1.0 - state.momentum) * state.running_var[static_cast<size_t>(f)] + state.momentum * var;
        }
    } else {
        for (int64_t f = 0; f < feats; ++f) {
            double m = state.running_mean[static_cast<size_t>(f)];
            double var = state.running_var[static_cast<size_t>(f)];
            ctx[static_cast<size_t>(f)] = m;
            ctx[static_cast<size_t>(feats + f)] = var;
            double denom = std::sqrt(std::max(var, kBnVarFloor));
            for (int64_t r = 0; r < rows; ++r)
                out[static_cast<size_t>(r * feats + f)] =
                    (x.v[static_cast<size_t>(r * feats + f)] - m) / denom;
        }
    }
    return wrap(t, record(t, Op::BatchNorm, {ix}, x.shape, std::move(out), std::move(ctx),
                          {training ? 1 : 0}));
}

Tensor dropout(Tape& t, const Tensor& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    int ix = ensure_on_tape(t, x);
    if (!training || rate == 0.0) {
        return wrap(t, record(t, Op::Dropout, {ix}, x.shape, x.v,
                              std::vector<double>(x.v.size(), 1.0)));
    }
    double keep = 1.0 - rate;
    std::vector<double> mask(x.v.size());
    std::vector<double> out(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) {
        mask[i] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
        out[i] = x.v[i] * mask[i];
    }
    return wrap(t, record(t, Op::Dropout, {ix}, x.shape, std::move(out), std::move(mask)));
}

Tensor reduce_sum(Tape& t, const Tensor& x) {
    int ix = ensure_on_tape(t, x);
    double s = 0.0;
    for (double v : x.v) s += v;
    return wrap(t, record(t, Op::ReduceSum, {ix}, {1}, {s}));
}

Tensor reduce_mean(Tape& t, const Tensor& x) {
    int ix = ensure_on_tape(t, x);
    double s = 0.0;
    for (double v : x.v) s += v;
    return wrap(t, record(t, Op::ReduceMean, {ix}, {1}, {s / static_cast<double>(x.v.size())}));
}

namespace {

Tensor reduce_axis_impl(Tape& t, const Tensor& x, int axis, bool mean) {
    int64_t outer, len, inner;
    axis_split(x.shape, axis, outer, len, inner);
    if (len == 0) throw ShapeError("reduce: empty axis");
    std::vector<int64_t> shape;
    for (int i = 0; i < x.rank(); ++i)
        if (i != axis) shape.push_back(x.shape[static_cast<size_t>(i)]);
    if (shape.empty()) shape.push_back(1);
    int ix = ensure_on_tape(t, x);
    std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < len; ++a) {
            const double* src = x.v.data() + (o * len + a) * inner;
            double* dst = out.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    if (mean)
        for (double& v : out) v /= static_cast<double>(len);
    return wrap(t, record(t, mean ? Op::ReduceMeanAxis : Op::ReduceSumAxis, {ix}, std::move(shape),
                          std::move(out), {}, {static_cast<int64_t>(axis)}));
}

}  // namespace

Tensor reduce_sum_axis(Tape& t, const Tensor& x, int axis) { return reduce_axis_impl(t, x, axis, false); }
Tensor reduce_mean_axis(Tape& t, const Tensor& x, int axis) { return reduce_axis_impl(t, x, axis, true); }

Tensor l2_norm(Tape& t, const Tensor& x) {
    int ix = ensure_on_tape(t, x);
    double s = 0.0;
    for (double v : x.v) s += v * v;
    return wrap(t, record(t, Op::L2Norm, {ix}, {1}, {std::sqrt(s)}));
}

Tensor conv_block_3x3(Tape& t, const Tensor& x, const Tensor& k1, const Tensor& b1,
                      const Tensor& k2, const Tensor& b2, double rate, bool training, Rng& rng) {
    if (x.rank() != 3 || k1.rank() != 4 || k2.rank() != 4)
        throw ShapeError("conv_block_3x3: expected x[Cin,H,W] and rank-4 kernels");
    int64_t cin = x.shape[0], h = x.shape[1], w = x.shape[2];
    int64_t hid = k1.shape[0];
    if (k1.shape[1] != cin || k1.shape[2] != 3 || k1.shape[3] != 3 || k2.shape[1] != hid ||
        k2.shape[2] != 3 || k2.shape[3] != 3)
        throw ShapeError("conv_block_3x3: kernel shapes disagree with the input");
    int64_t cout = k2.shape[0];
    if (b1.numel() != hid || b2.numel() != cout) throw ShapeError("conv_block_3x3: bias sizes");
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("conv_block_3x3: dropout rate in [0,1)");
    if (w < 2) throw ShapeError("conv_block_3x3: width >= 2 required");
    int ix = ensure_on_tape(t, x);
    int ik1 = ensure_on_tape(t, k1);
    int ib1 = ensure_on_tape(t, b1);
    int ik2 = ensure_on_tape(t, k2);
    int ib2 = ensure_on_tape(t, b2);

    size_t mid_n = static_cast<size_t>(hid * h * w);
    // ctx: multiplier m = dropmask * [pre > 0], then the dropped hidden values
    std::vector<double> ctx(2 * mid_n);
    double* m = ctx.data();
    double* hdrop = ctx.data() + mid_n;
    {
        std::vector<double> pre(mid_n, 0.0);
        conv2d_3x3_forward(x.v.data(), k1.v.data(), pre.data(), cin, hid, h, w);
        double keep = 1.0 - rate;
        bool drop = training && rate > 0.0;
        for (int64_t c = 0; c < hid; ++c) {
            double bias = b1.v[static_cast<size_t>(c)];
            for (int64_t i = 0; i < h * w; ++i) {
                size_t q = static_cast<size_t>(c * h * w + i);
                double z = pre[q] + bias;
                double mult = z > 0.0 ? 1.0 : 0.0;
                if (drop && mult != 0.0) mult = rng.uniform() < rate ? 0.0 : 1.0 / keep;
                m[q] = mult;
                hdrop[q] = mult * z;
            }
        }
    }
    std::vector<double> out(static_cast<size_t>(cout * h * w), 0.0);
    conv2d_3x3_forward(hdrop, k2.v.data(), out.data(), hid, cout, h, w);
    for (int64_t c = 0; c < cout; ++c) {
        double bias = b2.v[static_cast<size_t>(c)];
        for (int64_t i = 0; i < h * w; ++i) out[static_cast<size_t>(c * h * w + i)] += bias;
    }
    return wrap(t, record(t, Op::ConvBlock3x3, {ix, ik1, ib1, ik2, ib2}, {cout, h, w},
                          std::move(out), std::move(ctx), {cin, hid, cout, h, w}));
}

Tensor irfft_cols(Tape& t, const Tensor& re, const Tensor& im, int64_t n) {
    if (re.rank() != 2 || !re.same_shape(im))
        throw ShapeError("irfft_cols: matching [F,C] real/imag parts required");
    int64_t bins = re.shape[0], cols = re.shape[1];
    if (bins != n / 2 + 1)
        throw ShapeError("irfft_cols: " + std::to_string(bins) + " bins inconsistent with n=" +
                         std::to_string(n));
    int ire = ensure_on_tape(t, re);
    int iim = ensure_on_tape(t, im);
    std::vector<double> out(static_cast<size_t>(n * cols));
    ComplexTensor spec({bins});
    for (int64_t c = 0; c < cols; ++c) {
        for (int64_t f = 0; f < bins; ++f) {
            spec.re[static_cast<size_t>(f)] = re.v[static_cast<size_t>(f * cols + c)];
            spec.im[static_cast<size_t>(f)] = im.v[static_cast<size_t>(f * cols + c)];
        }
        std::vector<double> x = spectral::irfft(spec, n);
        for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i * cols + c)] = x[static_cast<size_t>(i)];
    }
    return wrap(t, record(t, Op::IrfftCols, {ire, iim}, {n, cols}, std::move(out), {}, {n}));
}

// --- backward ------------------------------------------------------------

namespace {

// First contribution moves or copies the buffer in; later ones add. The
// zero-fill-then-add pattern doubles memory traffic on hot tapes.
void accum(Node& n, std::vector<double>&& g) {
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
        n.grad = std::move(g);
        return;
    }
    for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void accum(Node& n, const std::vector<double>& g) {
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
        n.grad = g;
        return;
    }
    for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void accum_binary_move(Node& n, std::vector<double>&& g) {
    if (!n.requires_grad) return;
    if (n.value.size() == 1 && g.size() > 1) {
        double s = 0.0;
        for (double v : g) s += v;
        if (n.grad.empty()) n.grad.assign(1, 0.0);
        n.grad[0] += s;
        return;
    }
    accum(n, std::move(g));
}

// accumulate into a possibly-scalar input of a binary op
void accum_binary(Node& n, const std::vector<double>& g, bool negate = false) {
    if (!n.requires_grad) return;
    if (n.value.size() == 1 && g.size() > 1) {
        double s = 0.0;
        for (double v : g) s += v;
        if (n.grad.empty()) n.grad.assign(1, 0.0);
        n.grad[0] += negate ? -s : s;
        return;
    }
    if (!negate) {
        accum(n, g);
        return;
    }
    if (n.grad.empty()) {
        std::vector<double> neg(g.size());
        for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        n.grad = std::move(neg);
        return;
    }
    for (size_t i = 0; i < g.size(); ++i) n.grad[i] -= g[i];
}

}  // namespace

void backward(Tape& t, const Tensor& root) {
    if (root.node < 0) throw ShapeError("backward: root is not on the tape");
    Node& rn = t.node(root.node);
    if (rn.value.size() != 1) throw ShapeError("backward: root must be scalar");
    for (size_t i = 0; i < t.size(); ++i) t.node(static_cast<int>(i)).grad.clear();
    rn.grad.assign(1, 1.0);

    for (int id = root.node; id >= 0; --id) {
        Node& n = t.node(id);
        if (n.grad.empty() || !n.requires_grad) continue;
        const std::vector<double>& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add: {
                accum_binary(t.node(n.inputs[0]), g);
                accum_binary(t.node(n.inputs[1]), g);
                break;
            }
            case Op::Sub: {
                accum_binary(t.node(n.inputs[0]), g);
                accum_binary(t.node(n.inputs[1]), g, true);
                break;
            }
            case Op::Mul: {
                Node& a = t.node(n.inputs[0]);
                Node& b = t.node(n.inputs[1]);
                size_t sz = n.value.size();
                if (a.requires_grad) {
                    std::vector<double> ga(sz);
                    for (size_t i = 0; i < sz; ++i)
                        ga[i] = g[i] * (b.value.size() == 1 ? b.value[0] : b.value[i]);
                    accum_binary_move(a, std::move(ga));
                }
                if (b.requires_grad) {
                    std::vector<double> gb(sz);
                    for (size_t i = 0; i < sz; ++i)
                        gb[i] = g[i] * (a.value.size() == 1 ? a.value[0] : a.value[i]);
                    accum_binary_move(b, std::move(gb));
                }
                break;
            }
            case Op::Div: {
                Node& a = t.node(n.inputs[0]);
                Node& b = t.node(n.inputs[1]);
                size_t sz = n.value.size();
                if (a.requires_grad) {
                    std::vector<double> ga(sz);
                    for (size_t i = 0; i < sz; ++i)
                        ga[i] = g[i] / (b.value.size() == 1 ? b.value[0] : b.value[i]);
                    accum_binary_move(a, std::move(ga));
                }
                if (b.requires_grad) {
                    std::vector<double> gb(sz);
                    for (size_t i = 0; i < sz; ++i) {
                        double bv = b.value.size() == 1 ? b.value[0] : b.value[i];
                        double av = a.value.size() == 1 ? a.value[0] : a.value[i];
                        gb[i] = -g[i] * av / (bv * bv);
                    }
                    accum_binary_move(b, std::move(gb));
                }
                break;
            }
            case Op::Affine: {
                std::vector<double> gx(g.size());
                for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * n.ctx[0];
                accum(t.node(n.inputs[0]), std::move(gx));
                break;
            }
            case Op::Relu: {
                Node& a = t.node(n.inputs[0]);
                std::vector<double> gx(g.size());
                for (size_t i = 0; i < g.size(); ++i) gx[i] = a.value[i] > 0.0 ? g[i] : 0.0;
                accum(a, std::move(gx));
                break;
            }
            case Op::Sigmoid: {
                std::vector<double> gx(g.size());
                for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * n.value[i] * (1.0 - n.value[i]);
                accum(t.node(n.inputs[0]), std::move(gx));
                break;
            }
            case Op::Sqrt: {
                std::vector<double> gx(g.size());
                for (size_t i = 0; i < g.size(); ++i)
                    gx[i] = g[i] / (2.0 * std::max(n.value[i], 1e-9));
                accum(t.node(n.inputs[0]), std::move(gx));
                break;
            }
            case Op::Log: {
                Node& a = t.node(n.inputs[0]);
                std::vector<double> gx(g.size());
                for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / a.value[i];
                accum(a, std::move(gx));
                break;
            }
            case Op::Softmax: {
                bool along_cols = n.ictx[0] == 1;
                int64_t rows = n.shape.size() == 2 ? n.shape[0] : 1;
                int64_t cols = n.shape.size() == 2 ? n.shape[1] : n.shape[0];
                std::vector<double> gx(g.size());
                if (along_cols) {
                    for (int64_t r = 0; r < rows; ++r) {
                        const double* y = n.value.data() + r * cols;
                        const double* gr = g.data() + r * cols;
                        double dot = 0.0;
                        for (int64_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
                        for (int64_t c = 0; c < cols; ++c)
                            gx[static_cast<size_t>(r * cols + c)] = (gr[c] - dot) * y[c];
                    }
                } else {
                    for (int64_t c = 0; c < cols; ++c) {
                        double dot = 0.0;
                        for (int64_t r = 0; r < rows; ++r)
                            dot += g[static_cast<size_t>(r * cols + c)] * n.value[static_cast<size_t>(r * cols + c)];
                        for (int64_t r = 0; r < rows; ++r) {
                            size_t i = static_cast<size_t>(r * cols + c);
                            gx[i] = (g[i] - dot) * n.value[i];
                        }
                    }
                }
                accum(t.node(n.inputs[0]), std::move(gx));
                break;
            }
            case Op::Matmul: {
                Node& a = t.node(n.inputs[0]);
                Node& b = t.node(n.inputs[1]);
                int64_t m = n.shape[0], nn = n.shape[1];
                int64_t k = a.shape[1];
                if (a.requires_grad) {
                    std::vector<double> ga(a.value.size(), 0.0);
                    // ga = g * b^T
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < nn; ++j) {
                            double gv = g[static_cast<size_t>(i * nn + j)];
                            if (gv == 0.0) continue;
                            const double* brow = b.value.data() + 0 * nn + j;
                            double* garow = ga.data() + i * k;
                            for (int64_t p = 0; p < k; ++p) garow[p] += gv * brow[p * nn];
                        }
                    accum(a, std::move(ga));
                }
                if (b.requires_grad) {
                    std::vector<double> gb(b.value.size(), 0.0);
                    // gb = a^T * g
                    for (int64_t i = 0; i < m; ++i) {
                        const double* arow = a.value.data() + i * k;
                        const double* grow = g.data() + i * nn;
                        for (int64_t p = 0; p < k; ++p) {
                            double av = arow[p];
                            if (av == 0.0) continue;
                            double* gbrow = gb.data() + p * nn;
                            for (int64_t j = 0; j < nn; ++j) gbrow[j] += av * grow[j];
                        }
                    }
                    accum(b, std::move(gb));
                }
                break;
            }
            case Op::Transpose: {
                int64_t r = n.shape[0], c = n.shape[1];  // output shape
                std::vector<double> gx(g.size());
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j)
                        gx[static_cast<size_t>(j * r + i)] = g[static_cast<size_t>(i * c + j)];
                accum(t.node(n.inputs[0]), std::move(gx));
                break;
            }
            case Op::Conv1d: {
                Node& x = t.node(n.inputs[0]);
                Node& k = t.node(n.inputs[1]);
                int64_t pad_left = n.ictx[0], len = n.ictx[1], kw = n.ictx[2];
                int64_t cin = n.ictx[3], cout = n.ictx[4];
                int64_t out_len = n.shape[1];
                if (x.requires_grad) {
                    std::vector<double> gx(x.value.size(), 0.0);
                    for (int64_t co = 0; co < cout; ++co)
                        for (int64_t ci = 0; ci < cin; ++ci) {
                            const double* kr = k.value.data() + (co * cin + ci) * kw;
                            const double* gr = g.data() + co * out_len;
                            double* gxr = gx.data() + ci * len;
                            for (int64_t p = 0; p < out_len; ++p)
                                for (int64_t q = 0; q < kw; ++q) {
                                    int64_t src = p + q - pad_left;
                                    if (src >= 0 && src < len) gxr[src] += gr[p] * kr[q];
                                }
                        }
                    accum(x, std::move(gx));
                }
                if (k.requires_grad) {
                    std::vector<double> gk(k.value.size(), 0.0);
                    for (int64_t co = 0; co < cout; ++co)
                        for (int64_t ci = 0; ci < cin; ++ci) {
                            const double* xr = x.value.data() + ci * len;
                            const double* gr = g.data() + co * out_len;
                            double* gkr = gk.data() + (co * cin + ci) * kw;
                            for (int64_t p = 0; p < out_len; ++p)
                                for (int64_t q = 0; q < kw; ++q) {
                                    int64_t src = p + q - pad_left;
                                    if (src >= 0 && src < len) gkr[q] += gr[p] * xr[src];
                                }
                        }
                    accum(k, std::move(gk));
                }
                break;
            }
            case Op::Conv2d: {
                Node& x = t.node(n.inputs[0]);
                Node& k = t.node(n.inputs[1]);
                int64_t ph = n.ictx[0], pw = n.ictx[1], cin = n.ictx[2], cout = n.ictx[3];
                int64_t h = n.ictx[4], w = n.ictx[5], kh = n.ictx[6], kw = n.ictx[7];
                if (kh == 3 && kw == 3 && w >= 2) {
                    if (x.requires_grad) {
                        std::vector<double> gx(x.value.size(), 0.0);
                        conv2d_3x3_backward_x(g.data(), k.value.data(), gx.data(), cin, cout, h, w);
                        accum(x, std::move(gx));
                    }
                    if (k.requires_grad) {
                        std::vector<double> gk(k.value.size(), 0.0);
                        conv2d_3x3_backward_k(g.data(), x.value.data(), gk.data(), cin, cout, h, w);
                        accum(k, std::move(gk));
                    }
                    break;
                }
                if (x.requires_grad) {
                    std::vector<double> gx(x.value.size(), 0.0);
                    for (int64_t co = 0; co < cout; ++co)
                        for (int64_t ci = 0; ci < cin; ++ci)
                            for (int64_t dy = 0; dy < kh; ++dy)
                                for (int64_t dx = 0; dx < kw; ++dx) {
                                    double kv = k.value[static_cast<size_t>(((co * cin + ci) * kh + dy) * kw + dx)];
                                    if (kv == 0.0) continue;
                                    for (int64_t y = 0; y < h; ++y) {
                                        int64_t sy = y + dy - ph;
                                        if (sy < 0 || sy >= h) continue;
                                        const double* gr = g.data() + (co * h + y) * w;
                                        double* gxr = gx.data() + (ci * h + sy) * w;
                                        int64_t x0 = std::max<int64_t>(0, pw - dx);
                                        int64_t x1 = std::min(w, w + pw - dx);
                                        for (int64_t xx = x0; xx < x1; ++xx)
                                            gxr[xx + dx - pw] += kv * gr[xx];
                                    }
                                }
                    accum(x, std::move(gx));
                }
                if (k.requires_grad) {
                    std::vector<double> gk(k.value.size(), 0.0);
                    for (int64_t co = 0; co < cout; ++co)
                        for (int64_t ci = 0; ci < cin; ++ci)
                            for (int64_t dy = 0; dy < kh; ++dy)
                                for (int64_t dx = 0; dx < kw; ++dx) {
                                    double acc = 0.0;
                                    for (int64_t y = 0; y < h; ++y) {
                                        int64_t sy = y + dy - ph;
                                        if (sy < 0 || sy >= h) continue;
                                        const double* gr = g.data() + (co * h + y) * w;
                                        const double* xr = x.value.data() + (ci * h + sy) * w;
                                        int64_t x0 = std::max<int64_t>(0, pw - dx);
                                        int64_t x1 = std::min(w, w + pw - dx);
                                        for (int64_t xx = x0; xx < x1; ++xx)
                                            acc += gr[xx] * xr[xx + dx - pw];
                                    }
                                    gk[static_cast<size_t>(((co * cin + ci) * kh + dy) * kw + dx)] += acc;
                                }
                    accum(k, std::move(gk));
                }
                break;
            }
            case Op::ScaleAxis: {
                Node& x = t.node(n.inputs[0]);
                Node& vec = t.node(n.inputs[1]);
                int axis = static_cast<int>(n.ictx[0]);
                int64_t outer, len, inner;
                axis_split(n.shape, axis, outer, len, inner);
                if (x.requires_grad) {
                    std::vector<double> gx(x.value.size());
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t a = 0; a < len; ++a) {
                            double s = vec.value[static_cast<size_t>(a)];
                            const double* gr = g.data() + (o * len + a) * inner;
                            double* dst = gx.data() + (o * len + a) * inner;
                            for (int64_t i = 0; i < inner; ++i) dst[i] = gr[i] * s;
                        }
                    accum(x, std::move(gx));
                }
                if (vec.requires_grad) {
                    std::vector<double> gv(vec.value.size(), 0.0);
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t a = 0; a < len; ++a) {
                            const double* gr = g.data() + (o * len + a) * inner;
                            const double* xr = x.value.data() + (o * len + a) * inner;
                            double acc = 0.0;
                            for (int64_t i = 0; i < inner; ++i) acc += gr[i] * xr[i];
                            gv[static_cast<size_t>(a)] += acc;
                        }
                    accum(vec, std::move(gv));
                }
                break;
            }
            case Op::AddVec: {
                Node& x = t.node(n.inputs[0]);
                Node& vec = t.node(n.inputs[1]);
                int axis = static_cast<int>(n.ictx[0]);
                int64_t outer, len, inner;
                axis_split(n.shape, axis, outer, len, inner);
                if (x.requires_grad) accum(x, g);
                if (vec.requires_grad) {
                    std::vector<double> gv(vec.value.size(), 0.0);
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t a = 0; a < len; ++a) {
                            const double* gr = g.data() + (o * len + a) * inner;
                            double acc = 0.0;
                            for (int64_t i = 0; i < inner; ++i) acc += gr[i];
                            gv[static_cast<size_t>(a)] += acc;
                        }
                    accum(vec, std::move(gv));
                }
                break;
            }
            case Op::Pick: {
                Node& vec = t.node(n.inputs[0]);
                std::vector<double> gv(vec.value.size(), 0.0);
                gv[static_cast<size_t>(n.ictx[0])] = g[0];
                accum(vec, std::move(gv));
                break;
            }
            case Op::Concat0: {
                size_t off = 0;
                for (size_t part = 0; part < n.inputs.size(); ++part) {
                    Node& p = t.node(n.inputs[part]);
                    size_t count = static_cast<size_t>(n.ictx[part]);
                    if (p.requires_grad) {
                        std::vector<double> gp(g.begin() + static_cast<std::ptrdiff_t>(off),
                                               g.begin() + static_cast<std::ptrdiff_t>(off + count));
                        accum(p, std::move(gp));
                    }
                    off += count;
                }
                break;
            }
            case Op::ConcatCols: {
                Node& a = t.node(n.inputs[0]);
                Node& b = t.node(n.inputs[1]);
                int64_t ca = n.ictx[0], cb = n.ictx[1];
                int64_t r = n.shape[0];
                if (a.requires_grad) {
                    std::vector<double> ga(static_cast<size_t>(r * ca));
                    for (int64_t i = 0; i < r; ++i)
                        std::memcpy(ga.data() + i * ca, g.data() + i * (ca + cb),
                                    sizeof(double) * static_cast<size_t>(ca));
                    accum(a, std::move(ga));
                }
                if (b.requires_grad) {
                    std::vector<double> gb(static_cast<size_t>(r * cb));
                    for (int64_t i = 0; i < r; ++i)
                        std::memcpy(gb.data() + i * cb, g.data() + i * (ca + cb) + ca,
                                    sizeof(double) * static_cast<size_t>(cb));
                    accum(b, std::move(gb));
                }
                break;
            }
            case Op::Slice0: {
                Node& x = t.node(n.inputs[0]);
                int64_t start = n.ictx[0], len = n.ictx[1], inner = n.ictx[2];
                std::vector<double> gx(x.value.size(), 0.0);
                std::memcpy(gx.data() + start * inner, g.data(),
                            sizeof(double) * static_cast<size_t>(len * inner));
                accum(x, std::move(gx));
                break;
            }
            case Op::Reshape: {
                accum(t.node(n.inputs[0]), g);
                break;
            }
            case Op::Cumsum: {
                // d/dx_i sum over j>=i of g_j
                std::vector<double> gx(g.size());
                double acc = 0.0;
                for (size_t i = g.size(); i-- > 0;) {
                    acc += g[i];
                    gx[i] = acc;
                }
                accum(t.node(n.inputs[0]), std::move(gx));
                break;
            }
            case Op::BatchNorm: {
                Node& x = t.node(n.inputs[0]);
                bool training = n.ictx[0] == 1;
                int64_t rows = n.shape[0], feats = n.shape[1];
                std::vector<double> gx(g.size());
                for (int64_t f = 0; f < feats; ++f) {
                    double var = n.ctx[static_cast<size_t>(feats + f)];
                    bool clamped = var < kBnVarFloor;
                    double denom = std::sqrt(std::max(var, kBnVarFloor));
                    if (!training) {
                        for (int64_t r = 0; r < rows; ++r)
                            gx[static_cast<size_t>(r * feats + f)] =
                                g[static_cast<size_t>(r * feats + f)] / denom;
                        continue;
                    }
                    double gsum = 0.0, gdot = 0.0;
                    for (int64_t r = 0; r < rows; ++r) {
                        size_t i = static_cast<size_t>(r * feats + f);
                        gsum += g[i];
                        gdot += g[i] * n.value[i];
                    }
                    double inv_rows = 1.0 / static_cast<double>(rows);
                    for (int64_t r = 0; r < rows; ++r) {
                        size_t i = static_cast<size_t>(r * feats + f);
                        double d = g[i] - gsum * inv_rows;
                        if (!clamped) d -= n.value[i] * gdot * inv_rows;
                        gx[i] = d / denom;
                    }
                }
                accum(x, std::move(gx));
                break;
            }
            case Op::Dropout: {
                std::vector<double> gx(g.size());
                for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * n.ctx[i];
                accum(t.node(n.inputs[0]), std::move(gx));
                break;
            }
            case Op::ReduceSum: {
                Node& x = t.node(n.inputs[0]);
                std::vector<double> gx(x.value.size(), g[0]);
                accum(x, std::move(gx));
                break;
            }
            case Op::ReduceMean: {
                Node& x = t.node(n.inputs[0]);
                std::vector<double> gx(x.value.size(), g[0] / static_cast<double>(x.value.size()));
                accum(x, std::move(gx));
                break;
            }
            case Op::ReduceSumAxis:
            case Op::ReduceMeanAxis: {
                Node& x = t.node(n.inputs[0]);
                int axis = static_cast<int>(n.ictx[0]);
                int64_t outer, len, inner;
                axis_split(x.shape, axis, outer, len, inner);
                double scale = n.op == Op::ReduceMeanAxis ? 1.0 / static_cast<double>(len) : 1.0;
                std::vector<double> gx(x.value.size());
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t a = 0; a < len; ++a) {
                        const double* gr = g.data() + o * inner;
                        double* dst = gx.data() + (o * len + a) * inner;
                        for (int64_t i = 0; i < inner; ++i) dst[i] = gr[i] * scale;
                    }
                accum(x, std::move(gx));
                break;
            }
            case Op::L2Norm: {
                Node& x = t.node(n.inputs[0]);
                double norm = std::max(n.value[0], 1e-12);
                std::vector<double> gx(x.value.size());
                for (size_t i = 0; i < gx.size(); ++i) gx[i] = g[0] * x.value[i] / norm;
                accum(x, std::move(gx));
                break;
            }
            case Op::ConvBlock3x3: {
                Node& x = t.node(n.inputs[0]);
                Node& k1 = t.node(n.inputs[1]);
                Node& b1 = t.node(n.inputs[2]);
                Node& k2 = t.node(n.inputs[3]);
                Node& b2 = t.node(n.inputs[4]);
                int64_t cin = n.ictx[0], hid = n.ictx[1], cout = n.ictx[2];
                int64_t h = n.ictx[3], w = n.ictx[4];
                size_t mid_n = static_cast<size_t>(hid * h * w);
                const double* m = n.ctx.data();
                const double* hdrop = n.ctx.data() + mid_n;
                if (b2.requires_grad) {
                    std::vector<double> gb(static_cast<size_t>(cout), 0.0);
                    for (int64_t c = 0; c < cout; ++c)
                        for (int64_t i = 0; i < h * w; ++i)
                            gb[static_cast<size_t>(c)] += g[static_cast<size_t>(c * h * w + i)];
                    accum(b2, std::move(gb));
                }
                if (k2.requires_grad) {
                    std::vector<double> gk(k2.value.size(), 0.0);
                    conv2d_3x3_backward_k(g.data(), hdrop, gk.data(), hid, cout, h, w);
                    accum(k2, std::move(gk));
                }
                std::vector<double> gh(mid_n, 0.0);
                conv2d_3x3_backward_x(g.data(), k2.value.data(), gh.data(), hid, cout, h, w);
                for (size_t i = 0; i < mid_n; ++i) gh[i] *= m[i];
                if (b1.requires_grad) {
                    std::vector<double> gb(static_cast<size_t>(hid), 0.0);
                    for (int64_t c = 0; c < hid; ++c)
                        for (int64_t i = 0; i < h * w; ++i)
                            gb[static_cast<size_t>(c)] += gh[static_cast<size_t>(c * h * w + i)];
                    accum(b1, std::move(gb));
                }
                if (k1.requires_grad) {
                    std::vector<double> gk(k1.value.size(), 0.0);
                    conv2d_3x3_backward_k(gh.data(), x.value.data(), gk.data(), cin, hid, h, w);
                    accum(k1, std::move(gk));
                }
                if (x.requires_grad) {
                    std::vector<double> gx(x.value.size(), 0.0);
                    conv2d_3x3_backward_x(gh.data(), k1.value.data(), gx.data(), cin, hid, h, w);
                    accum(x, std::move(gx));
                }
                break;
            }
            case Op::IrfftCols: {
                Node& re = t.node(n.inputs[0]);
                Node& im = t.node(n.inputs[1]);
                int64_t nlen = n.ictx[0];
                int64_t bins = re.shape[0], cols = re.shape[1];
                std::vector<double> gre(re.value.size(), 0.0), gim(im.value.size(), 0.0);
                std::vector<double> col(static_cast<size_t>(nlen));
                for (int64_t c = 0; c < cols; ++c) {
                    for (int64_t i = 0; i < nlen; ++i)
                        col[static_cast<size_t>(i)] = g[static_cast<size_t>(i * cols + c)];
                    // adjoint of the linear inverse transform, via a forward rfft
                    ComplexTensor spec = spectral::rfft(col);
                    for (int64_t f = 0; f < bins; ++f) {
                        double wgt = (f == 0 || (nlen % 2 == 0 && f == nlen / 2)) ? 1.0 : 2.0;
                        gre[static_cast<size_t>(f * cols + c)] =
                            wgt / static_cast<double>(nlen) * spec.re[static_cast<size_t>(f)];
                        gim[static_cast<size_t>(f * cols + c)] =
                            (f == 0 || (nlen % 2 == 0 && f == nlen / 2))
                                ? 0.0
                                : 2.0 / static_cast<double>(nlen) * spec.im[static_cast<size_t>(f)];
                    }
                }
                if (re.requires_grad) accum(re, std::move(gre));
                if (im.requires_grad) accum(im, std::move(gim));
                break;
            }
        }
    }
}

// --- ParamRegistry -------------------------------------------------------

Tensor& ParamRegistry::add(const std::string& name, Tensor init) {
    if (values_.count(name)) throw ConfigError("registry: duplicate parameter " + name);
    order_.push_back(name);
    return values_[name] = std::move(init);
}

Tensor& ParamRegistry::add_state(const std::string& name, Tensor init) {
    if (values_.count(name)) throw ConfigError("registry: duplicate state " + name);
    state_order_.push_back(name);
    return values_[name] = std::move(init);
}

Tensor& ParamRegistry::get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("registry: unknown name " + name);
    return it->second;
}

const Tensor& ParamRegistry::get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("registry: unknown name " + name);
    return it->second;
}

bool ParamRegistry::has(const std::string& name) const { return values_.count(name) != 0; }

int64_t ParamRegistry::count_parameters() const {
    int64_t total = 0;
    for (const std::string& n : order_) total += values_.at(n).numel();
    return total;
}

// --- grad_check ----------------------------------------------------------

GradCheckReport grad_check(ParamRegistry& params,
                           const std::function<double(const ParamRegistry&)>& eval,
                           const std::function<std::map<std::string, std::vector<double>>(
                               const ParamRegistry&)>& grads,
                           double step, double tolerance) {
    if (step <= 0.0) throw ConfigError("grad_check: step must be positive");
    std::map<std::string, std::vector<double>> analytic = grads(params);
    GradCheckReport report;
    for (const std::string& name : params.names()) {
        Tensor& p = params.get(name);
        const std::vector<double>& a = analytic.at(name);
        GradCheckEntry entry;
        entry.name = name;
        for (size_t i = 0; i < p.v.size(); ++i) {
            double keep = p.v[i];
            p.v[i] = keep + step;
            double up = eval(params);
            p.v[i] = keep - step;
            double down = eval(params);
            p.v[i] = keep;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("grad_check: non-finite loss while probing " + name);
            double numeric = (up - down) / (2.0 * step);
            double rel = std::abs(a[i] - numeric) / (std::abs(a[i]) + std::abs(numeric) + 1e-12);
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        entry.flagged = entry.max_rel_err > tolerance;
        report.worst = std::max(report.worst, entry.max_rel_err);
        if (entry.flagged) report.ok = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace m2fmoe
