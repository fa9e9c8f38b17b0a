#include "stf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace stf {

namespace alloc_stats {
Counters& counters() {
    static Counters c;
    return c;
}
}  // namespace alloc_stats

namespace {

std::shared_ptr<std::vector<double>> make_buffer(i64 n) {
    const i64 bytes = n * static_cast<i64>(sizeof(double));
    alloc_stats::on_alloc(bytes);
    return std::shared_ptr<std::vector<double>>(new std::vector<double>(static_cast<size_t>(n)),
                                                [bytes](std::vector<double>* p) {
                                                    alloc_stats::on_free(bytes);
                                                    delete p;
                                                });
}

// All matmul kernels accumulate into c, which callers pre-zero for a plain
// product. Loop orders keep the inner traversal contiguous.

// c[n x p] += a[n x k] * b[k x p]
void mm_nn_acc(const double* a, const double* b, double* c, i64 n, i64 k, i64 p) {
    for (i64 i = 0; i < n; ++i) {
        double* ci = c + i * p;
        const double* ai = a + i * k;
        for (i64 t = 0; t < k; ++t) {
            const double av = ai[t];
            if (av == 0.0) continue;
            const double* bt = b + t * p;
            for (i64 j = 0; j < p; ++j) ci[j] += av * bt[j];
        }
    }
}

// c[n x p] += a[n x k] * b[p x k]^T
void mm_nt_acc(const double* a, const double* b, double* c, i64 n, i64 k, i64 p) {
    for (i64 i = 0; i < n; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * p;
        for (i64 j = 0; j < p; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (i64 t = 0; t < k; ++t) s += ai[t] * bj[t];
            ci[j] += s;
        }
    }
}

// c[n x p] += a[k x n]^T * b[k x p]
void mm_tn_acc(const double* a, const double* b, double* c, i64 k, i64 n, i64 p) {
    for (i64 t = 0; t < k; ++t) {
        const double* at = a + t * n;
        const double* bt = b + t * p;
        for (i64 i = 0; i < n; ++i) {
            const double av = at[i];
            if (av == 0.0) continue;
            double* ci = c + i * p;
            for (i64 j = 0; j < p; ++j) ci[j] += av * bt[j];
        }
    }
}

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->attached()) continue;
        if (tape == nullptr) {
            tape = t->tape();
        } else {
            check_arg(tape == t->tape(), "op inputs belong to different gradient tapes");
        }
    }
    if (tape != nullptr) {
        check_arg(!tape->consumed(), "gradient tape already consumed by backward");
    }
    return tape;
}

void require_rank2(const Tensor& t, const char* op) {
    check_arg(t.rank() == 2, msg(op, ": expected rank-2 tensor, got shape ", shape_str(t.shape())));
}

using Buf = std::shared_ptr<const std::vector<double>>;

}  // namespace

i64 shape_numel(const Shape& s) {
    i64 n = 1;
    for (i64 e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i > 0) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_arg(shape_.size() <= 4, msg("tensor rank above 4 unsupported: ", shape_str(shape_)));
    for (i64 e : shape_) check_arg(e >= 0, msg("negative extent in shape ", shape_str(shape_)));
    data_ = make_buffer(shape_numel(shape_));
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape));
    check_arg(static_cast<i64>(values.size()) == t.size(),
              msg("from_data: ", values.size(), " values for shape ", shape_str(t.shape())));
    std::copy(values.begin(), values.end(), t.data_->begin());
    return t;
}

Tensor Tensor::identity(i64 n) {
    Tensor t({n, n});
    double* d = t.data_->data();
    for (i64 i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return t;
}

i64 Tensor::rows() const {
    check_arg(rank() == 2, msg("rows(): rank-2 required, shape ", shape_str(shape_)));
    return shape_[0];
}

i64 Tensor::cols() const {
    check_arg(rank() == 2, msg("cols(): rank-2 required, shape ", shape_str(shape_)));
    return shape_[1];
}

double Tensor::value() const {
    check_arg(size() == 1, msg("value(): tensor is not scalar, shape ", shape_str(shape_)));
    return (*data_)[0];
}

double Tensor::operator()(i64 i) const {
    check_arg(rank() == 1, "operator()(i): rank-1 required");
    return (*data_)[static_cast<size_t>(i)];
}

double Tensor::operator()(i64 i, i64 j) const {
    check_arg(rank() == 2, "operator()(i,j): rank-2 required");
    return (*data_)[static_cast<size_t>(i * shape_[1] + j)];
}

double Tensor::operator()(i64 i, i64 j, i64 k) const {
    check_arg(rank() == 3, "operator()(i,j,k): rank-3 required");
    return (*data_)[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
}

double* Tensor::mutable_data() {
    if (data_.use_count() > 1) {
        auto fresh = make_buffer(size());
        std::copy(data_->begin(), data_->end(), fresh->begin());
        data_ = std::move(fresh);
    }
    return data_->data();
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- Gradients --------------------------------------------------------------

Tensor Gradients::of(const Tensor& t) const {
    if (t.attached() && t.tape() == source_) {
        auto it = by_node_.find(t.node());
        if (it != by_node_.end()) return it->second;
    }
    return Tensor::zeros(t.shape());
}

// ---- Tape -------------------------------------------------------------------

int Tape::record(i64 out_numel, BackwardFn fn) {
    check_arg(!consumed_, "gradient tape already consumed by backward");
    nodes_.push_back({out_numel, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::span<double> Tape::grad_buffer(int node) {
    auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), 0.0);
    return {g.data(), g.size()};
}

Tensor Tape::watch(const Tensor& t) {
    Tensor leaf = t.detached();
    int node = record(leaf.size(), nullptr);
    leaf.attach(this, node);
    watched_.emplace_back(node, leaf.shape());
    return leaf;
}

Gradients Tape::backward(const Tensor& loss) {
    check_arg(loss.attached() && loss.tape() == this,
              "backward: loss is detached from this tape");
    check_arg(loss.size() == 1, msg("backward: loss must be scalar, shape ", shape_str(loss.shape())));
    check_arg(!consumed_, "backward: tape already consumed");

    grads_.assign(nodes_.size(), {});
    grad_buffer(loss.node())[0] = 1.0;
    for (int i = loss.node(); i >= 0; --i) {
        auto& g = grads_[static_cast<size_t>(i)];
        if (g.empty()) continue;  // node does not influence the loss
        if (nodes_[static_cast<size_t>(i)].fn) nodes_[static_cast<size_t>(i)].fn({g.data(), g.size()}, *this);
    }

    Gradients out;
    out.source_ = this;
    for (auto& [node, shape] : watched_) {
        auto& g = grads_[static_cast<size_t>(node)];
        if (g.empty()) continue;
        Tensor gt = Tensor::from_data(shape, std::move(g));
        out.by_node_.emplace(node, std::move(gt));
    }
    consumed_ = true;
    nodes_.clear();
    nodes_.shrink_to_fit();
    grads_.clear();
    grads_.shrink_to_fit();
    return out;
}

// ---- op implementations -------------------------------------------------------

namespace {

// Accumulates src into the grad buffer of `node` if it is a live tape node.
void acc_into(Tape& tape, int node, std::span<const double> src) {
    if (node < 0) return;
    auto dst = tape.grad_buffer(node);
    for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

Tensor binary_pointwise(const Tensor& a, const Tensor& b, const char* name,
                        double (*fwd)(double, double), int mode) {
    check_arg(a.shape() == b.shape(),
              msg(name, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
    Tensor out(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data();
    const i64 n = a.size();
    for (i64 i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);

    if (Tape* tape = common_tape({&a, &b})) {
        const int na = a.node(), nb = b.node();
        Buf da = a.buffer(), db = b.buffer();
        int node = tape->record(out.size(), [na, nb, da, db, mode](std::span<const double> g, Tape& t) {
            const i64 n = static_cast<i64>(g.size());
            if (na >= 0) {
                auto ga = t.grad_buffer(na);
                if (mode == 2) {  // mul
                    const double* b = db->data();
                    for (i64 i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * b[i];
                } else {
                    for (i64 i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
                }
            }
            if (nb >= 0) {
                auto gb = t.grad_buffer(nb);
                if (mode == 0) {  // add
                    for (i64 i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
                } else if (mode == 1) {  // sub
                    for (i64 i = 0; i < n; ++i) gb[static_cast<size_t>(i)] -= g[static_cast<size_t>(i)];
                } else {  // mul
                    const double* a = da->data();
                    for (i64 i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * a[i];
                }
            }
        });
        out.attach(tape, node);
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_pointwise(a, b, "add", [](double x, double y) { return x + y; }, 0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_pointwise(a, b, "sub", [](double x, double y) { return x - y; }, 1);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_pointwise(a, b, "mul", [](double x, double y) { return x * y; }, 2);
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* pa = a.data().data();
    double* po = out.mutable_data();
    const i64 n = a.size();
    for (i64 i = 0; i < n; ++i) po[i] = c * pa[i];

    if (Tape* tape = common_tape({&a})) {
        const int na = a.node();
        int node = tape->record(out.size(), [na, c](std::span<const double> g, Tape& t) {
            auto ga = t.grad_buffer(na);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    require_rank2(m, "add_rowvec");
    check_arg(v.rank() == 1 && v.extent(0) == m.cols(),
              msg("add_rowvec: vector ", shape_str(v.shape()), " does not match columns of ",
                  shape_str(m.shape())));
    const i64 r = m.rows(), c = m.cols();
    Tensor out({r, c});
    const double* pm = m.data().data();
    const double* pv = v.data().data();
    double* po = out.mutable_data();
    for (i64 i = 0; i < r; ++i)
        for (i64 j = 0; j < c; ++j) po[i * c + j] = pm[i * c + j] + pv[j];

    if (Tape* tape = common_tape({&m, &v})) {
        const int nm = m.node(), nv = v.node();
        int node = tape->record(out.size(), [nm, nv, r, c](std::span<const double> g, Tape& t) {
            if (nm >= 0) acc_into(t, nm, g);
            if (nv >= 0) {
                auto gv = t.grad_buffer(nv);
                for (i64 i = 0; i < r; ++i)
                    for (i64 j = 0; j < c; ++j) gv[static_cast<size_t>(j)] += g[static_cast<size_t>(i * c + j)];
            }
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    check_arg(a.cols() == b.rows(), msg("matmul: inner extents differ: ", shape_str(a.shape()), " vs ",
                                        shape_str(b.shape())));
    const i64 n = a.rows(), k = a.cols(), p = b.cols();
    Tensor out({n, p});
    mm_nn_acc(a.data().data(), b.data().data(), out.mutable_data(), n, k, p);

    if (Tape* tape = common_tape({&a, &b})) {
        const int na = a.node(), nb = b.node();
        Buf da = a.buffer(), db = b.buffer();
        int node = tape->record(out.size(), [na, nb, da, db, n, k, p](std::span<const double> g, Tape& t) {
            if (na >= 0) mm_nt_acc(g.data(), db->data(), t.grad_buffer(na).data(), n, p, k);
            if (nb >= 0) mm_tn_acc(da->data(), g.data(), t.grad_buffer(nb).data(), n, k, p);
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor transpose(const Tensor& m) {
    require_rank2(m, "transpose");
    const i64 r = m.rows(), c = m.cols();
    Tensor out({c, r});
    const double* pm = m.data().data();
    double* po = out.mutable_data();
    for (i64 i = 0; i < r; ++i)
        for (i64 j = 0; j < c; ++j) po[j * r + i] = pm[i * c + j];

    if (Tape* tape = common_tape({&m})) {
        const int nm = m.node();
        int node = tape->record(out.size(), [nm, r, c](std::span<const double> g, Tape& t) {
            auto gm = t.grad_buffer(nm);
            for (i64 i = 0; i < r; ++i)
                for (i64 j = 0; j < c; ++j) gm[static_cast<size_t>(i * c + j)] += g[static_cast<size_t>(j * r + i)];
        });
        out.attach(tape, node);
    }
    return out;
}

namespace {

std::vector<i64> strides_of(const Shape& s) {
    std::vector<i64> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    return st;
}

// Maps flat index in the permuted layout back to the source flat index.
void permute_copy(const double* src, double* dst, const Shape& in_shape, const std::vector<int>& axes,
                  bool accumulate_into_src) {
    const size_t r = in_shape.size();
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
    const auto in_strides = strides_of(in_shape);
    const auto out_strides = strides_of(out_shape);
    const i64 total = shape_numel(in_shape);
    for (i64 flat = 0; flat < total; ++flat) {
        i64 rem = flat;
        i64 src_idx = 0;
        for (size_t i = 0; i < r; ++i) {
            const i64 coord = rem / out_strides[i];
            rem %= out_strides[i];
            src_idx += coord * in_strides[static_cast<size_t>(axes[i])];
        }
        if (accumulate_into_src) {
            dst[src_idx] += src[flat];
        } else {
            dst[flat] = src[src_idx];
        }
    }
}

}  // namespace

Tensor permute(const Tensor& t, const std::vector<int>& axes) {
    check_arg(static_cast<int>(axes.size()) == t.rank(),
              msg("permute: ", axes.size(), " axes for rank-", t.rank(), " tensor"));
    std::vector<bool> seen(axes.size(), false);
    for (int a : axes) {
        check_arg(a >= 0 && a < t.rank() && !seen[static_cast<size_t>(a)], "permute: invalid axis list");
        seen[static_cast<size_t>(a)] = true;
    }
    Shape out_shape(t.shape().size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = t.shape()[static_cast<size_t>(axes[i])];
    Tensor out(out_shape);
    permute_copy(t.data().data(), out.mutable_data(), t.shape(), axes, false);

    if (Tape* tape = common_tape({&t})) {
        const int nt = t.node();
        const Shape in_shape = t.shape();
        int node = tape->record(out.size(), [nt, in_shape, axes](std::span<const double> g, Tape& tp) {
            permute_copy(g.data(), tp.grad_buffer(nt).data(), in_shape, axes, true);
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor reshape(const Tensor& t, Shape shape) {
    check_arg(shape_numel(shape) == t.size(),
              msg("reshape: ", shape_str(t.shape()), " to ", shape_str(shape), " changes element count"));
    check_arg(shape.size() <= 4, msg("reshape: rank above 4 unsupported: ", shape_str(shape)));
    Tensor view = t.detached();  // shares the buffer; copy-on-write guards mutation
    view.shape_ = std::move(shape);

    if (Tape* tape = common_tape({&t})) {
        const int nt = t.node();
        int node = tape->record(view.size(), [nt](std::span<const double> g, Tape& tp) {
            acc_into(tp, nt, g);
        });
        view.attach(tape, node);
    }
    return view;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    check_arg(!parts.empty(), "concat_cols: no inputs");
    const i64 r = parts[0].rows();
    i64 total_c = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        check_arg(p.rows() == r, msg("concat_cols: row mismatch ", shape_str(p.shape()), " vs ",
                                     shape_str(parts[0].shape())));
        total_c += p.cols();
    }
    Tensor out({r, total_c});
    double* po = out.mutable_data();
    i64 offset = 0;
    for (const Tensor& p : parts) {
        const i64 c = p.cols();
        const double* pp = p.data().data();
        for (i64 i = 0; i < r; ++i)
            std::memcpy(po + i * total_c + offset, pp + i * c, static_cast<size_t>(c) * sizeof(double));
        offset += c;
    }

    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) ptrs.push_back(&p);
    Tape* tape = nullptr;
    for (const Tensor* p : ptrs) {
        if (p->attached()) {
            check_arg(tape == nullptr || tape == p->tape(), "concat_cols: inputs on different tapes");
            tape = p->tape();
        }
    }
    if (tape) {
        check_arg(!tape->consumed(), "gradient tape already consumed by backward");
        struct PartInfo {
            int node;
            i64 offset, cols;
        };
        std::vector<PartInfo> infos;
        i64 off = 0;
        for (const Tensor& p : parts) {
            infos.push_back({p.node(), off, p.cols()});
            off += p.cols();
        }
        int node = tape->record(out.size(), [infos, r, total_c](std::span<const double> g, Tape& t) {
            for (const auto& info : infos) {
                if (info.node < 0) continue;
                auto gp = t.grad_buffer(info.node);
                for (i64 i = 0; i < r; ++i)
                    for (i64 j = 0; j < info.cols; ++j)
                        gp[static_cast<size_t>(i * info.cols + j)] +=
                            g[static_cast<size_t>(i * total_c + info.offset + j)];
            }
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor slice_rows(const Tensor& m, i64 from, i64 to) {
    require_rank2(m, "slice_rows");
    check_arg(0 <= from && from <= to && to <= m.rows(),
              msg("slice_rows: range [", from, ",", to, ") out of bounds for ", shape_str(m.shape())));
    const i64 c = m.cols();
    Tensor out({to - from, c});
    std::memcpy(out.mutable_data(), m.data().data() + from * c,
                static_cast<size_t>((to - from) * c) * sizeof(double));

    if (Tape* tape = common_tape({&m})) {
        const int nm = m.node();
        int node = tape->record(out.size(), [nm, from, c](std::span<const double> g, Tape& t) {
            auto gm = t.grad_buffer(nm);
            for (size_t i = 0; i < g.size(); ++i) gm[static_cast<size_t>(from * c) + i] += g[i];
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor slice_cols(const Tensor& m, i64 from, i64 to) {
    require_rank2(m, "slice_cols");
    check_arg(0 <= from && from <= to && to <= m.cols(),
              msg("slice_cols: range [", from, ",", to, ") out of bounds for ", shape_str(m.shape())));
    const i64 r = m.rows(), c = m.cols(), w = to - from;
    Tensor out({r, w});
    const double* pm = m.data().data();
    double* po = out.mutable_data();
    for (i64 i = 0; i < r; ++i)
        std::memcpy(po + i * w, pm + i * c + from, static_cast<size_t>(w) * sizeof(double));

    if (Tape* tape = common_tape({&m})) {
        const int nm = m.node();
        int node = tape->record(out.size(), [nm, from, r, c, w](std::span<const double> g, Tape& t) {
            auto gm = t.grad_buffer(nm);
            for (i64 i = 0; i < r; ++i)
                for (i64 j = 0; j < w; ++j)
                    gm[static_cast<size_t>(i * c + from + j)] += g[static_cast<size_t>(i * w + j)];
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor pad_rows(const Tensor& m, i64 total_rows) {
    require_rank2(m, "pad_rows");
    check_arg(total_rows >= m.rows(), msg("pad_rows: target ", total_rows, " below current ", m.rows()));
    const i64 r = m.rows(), c = m.cols();
    Tensor out({total_rows, c});
    std::memcpy(out.mutable_data(), m.data().data(), static_cast<size_t>(r * c) * sizeof(double));

    if (Tape* tape = common_tape({&m})) {
        const int nm = m.node();
        int node = tape->record(out.size(), [nm, r, c](std::span<const double> g, Tape& t) {
            auto gm = t.grad_buffer(nm);
            for (size_t i = 0; i < static_cast<size_t>(r * c); ++i) gm[i] += g[i];
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor softmax_rows(const Tensor& m) {
    require_rank2(m, "softmax_rows");
    check_runtime(m.all_finite(), "softmax_rows: input contains non-finite values");
    const i64 r = m.rows(), c = m.cols();
    Tensor out({r, c});
    const double* pm = m.data().data();
    double* po = out.mutable_data();
    for (i64 i = 0; i < r; ++i) {
        const double* row = pm + i * c;
        double mx = row[0];
        for (i64 j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (i64 j = 0; j < c; ++j) {
            const double e = std::exp(row[j] - mx);
            po[i * c + j] = e;
            sum += e;
        }
        for (i64 j = 0; j < c; ++j) po[i * c + j] /= sum;
    }

    if (Tape* tape = common_tape({&m})) {
        const int nm = m.node();
        Buf y = out.buffer();
        int node = tape->record(out.size(), [nm, y, r, c](std::span<const double> g, Tape& t) {
            auto gm = t.grad_buffer(nm);
            const double* py = y->data();
            for (i64 i = 0; i < r; ++i) {
                double dot = 0.0;
                for (i64 j = 0; j < c; ++j) dot += g[static_cast<size_t>(i * c + j)] * py[i * c + j];
                for (i64 j = 0; j < c; ++j)
                    gm[static_cast<size_t>(i * c + j)] +=
                        py[i * c + j] * (g[static_cast<size_t>(i * c + j)] - dot);
            }
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    check_arg(x.rank() >= 1, "layer_norm: rank >= 1 required");
    const i64 d = x.shape().back();
    check_arg(gain.rank() == 1 && gain.extent(0) == d,
              msg("layer_norm: gain ", shape_str(gain.shape()), " does not match last extent of ",
                  shape_str(x.shape())));
    check_arg(bias.rank() == 1 && bias.extent(0) == d,
              msg("layer_norm: bias ", shape_str(bias.shape()), " does not match last extent of ",
                  shape_str(x.shape())));
    const i64 rows = x.size() / d;
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.size()));
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    const double* px = x.data().data();
    const double* pg = gain.data().data();
    const double* pb = bias.data().data();
    double* po = out.mutable_data();
    for (i64 i = 0; i < rows; ++i) {
        const double* row = px + i * d;
        double mean = 0.0;
        for (i64 j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (i64 j = 0; j < d; ++j) {
            const double dv = row[j] - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        (*inv_sigma)[static_cast<size_t>(i)] = inv;
        for (i64 j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * inv;
            (*xhat)[static_cast<size_t>(i * d + j)] = xh;
            po[i * d + j] = pg[j] * xh + pb[j];
        }
    }

    if (Tape* tape = common_tape({&x, &gain, &bias})) {
        const int nx = x.node(), ng = gain.node(), nb = bias.node();
        Buf gbuf = gain.buffer();
        int node = tape->record(
            out.size(), [nx, ng, nb, gbuf, xhat, inv_sigma, rows, d](std::span<const double> g, Tape& t) {
                const double* pg = gbuf->data();
                const double* xh = xhat->data();
                if (nx >= 0) {
                    auto gx = t.grad_buffer(nx);
                    for (i64 i = 0; i < rows; ++i) {
                        const double inv = (*inv_sigma)[static_cast<size_t>(i)];
                        double m1 = 0.0, m2 = 0.0;
                        for (i64 j = 0; j < d; ++j) {
                            const double a = g[static_cast<size_t>(i * d + j)] * pg[j];
                            m1 += a;
                            m2 += a * xh[i * d + j];
                        }
                        m1 /= static_cast<double>(d);
                        m2 /= static_cast<double>(d);
                        for (i64 j = 0; j < d; ++j) {
                            const double a = g[static_cast<size_t>(i * d + j)] * pg[j];
                            gx[static_cast<size_t>(i * d + j)] += inv * (a - m1 - xh[i * d + j] * m2);
                        }
                    }
                }
                if (ng >= 0) {
                    auto gg = t.grad_buffer(ng);
                    for (i64 i = 0; i < rows; ++i)
                        for (i64 j = 0; j < d; ++j)
                            gg[static_cast<size_t>(j)] += g[static_cast<size_t>(i * d + j)] * xh[i * d + j];
                }
                if (nb >= 0) {
                    auto gb = t.grad_buffer(nb);
                    for (i64 i = 0; i < rows; ++i)
                        for (i64 j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i * d + j)];
                }
            });
        out.attach(tape, node);
    }
    return out;
}

namespace {

Tensor unary_pointwise(const Tensor& t, double (*fwd)(double), double (*dfx)(double)) {
    Tensor out(t.shape());
    const double* pt = t.data().data();
    double* po = out.mutable_data();
    const i64 n = t.size();
    for (i64 i = 0; i < n; ++i) po[i] = fwd(pt[i]);

    if (Tape* tape = common_tape({&t})) {
        const int nt = t.node();
        Buf src = t.buffer();
        int node = tape->record(out.size(), [nt, src, dfx](std::span<const double> g, Tape& tp) {
            auto gt = tp.grad_buffer(nt);
            const double* x = src->data();
            for (size_t i = 0; i < g.size(); ++i) gt[i] += g[i] * dfx(x[i]);
        });
        out.attach(tape, node);
    }
    return out;
}

}  // namespace

Tensor relu(const Tensor& t) {
    return unary_pointwise(
        t, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& t) {
    return unary_pointwise(
        t, [](double x) { return std::fabs(x); },
        [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum_all(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    Tensor out = Tensor::scalar(s);

    if (Tape* tape = common_tape({&t})) {
        const int nt = t.node();
        const i64 n = t.size();
        int node = tape->record(1, [nt, n](std::span<const double> g, Tape& tp) {
            auto gt = tp.grad_buffer(nt);
            for (i64 i = 0; i < n; ++i) gt[static_cast<size_t>(i)] += g[0];
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor mean_all(const Tensor& t) {
    check_arg(t.size() > 0, "mean_all: empty tensor");
    return scale(sum_all(t), 1.0 / static_cast<double>(t.size()));
}

Tensor lookup_rows(const Tensor& table, std::span<const i64> indices) {
    require_rank2(table, "lookup_rows");
    const i64 r = table.rows(), d = table.cols();
    const i64 n = static_cast<i64>(indices.size());
    for (i64 idx : indices)
        check_arg(idx >= 0 && idx < r, msg("lookup_rows: index ", idx, " out of range [0,", r, ")"));
    Tensor out({n, d});
    const double* pt = table.data().data();
    double* po = out.mutable_data();
    for (i64 i = 0; i < n; ++i)
        std::memcpy(po + i * d, pt + indices[static_cast<size_t>(i)] * d,
                    static_cast<size_t>(d) * sizeof(double));

    if (Tape* tape = common_tape({&table})) {
        const int nt = table.node();
        std::vector<i64> idx(indices.begin(), indices.end());
        int node = tape->record(out.size(), [nt, idx, d](std::span<const double> g, Tape& tp) {
            auto gt = tp.grad_buffer(nt);
            for (size_t i = 0; i < idx.size(); ++i)
                for (i64 j = 0; j < d; ++j)
                    gt[static_cast<size_t>(idx[i] * d + j)] += g[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
        });
        out.attach(tape, node);
    }
    return out;
}

Tensor segment_mean_rows(const Tensor& m, i64 segments) {
    require_rank2(m, "segment_mean_rows");
    check_arg(segments >= 1, "segment_mean_rows: segment count must be >= 1");
    const i64 n = m.rows(), d = m.cols();
    check_arg(n % segments == 0,
              msg("segment_mean_rows: ", n, " rows not divisible by ", segments, " segments"));
    const i64 l = n / segments;
    Tensor out({segments, d});
    const double* pm = m.data().data();
    double* po = out.mutable_data();
    for (i64 s = 0; s < segments; ++s) {
        double* row = po + s * d;
        for (i64 i = 0; i < l; ++i) {
            const double* src = pm + (s * l + i) * d;
            for (i64 j = 0; j < d; ++j) row[j] += src[j];
        }
        for (i64 j = 0; j < d; ++j) row[j] /= static_cast<double>(l);
    }

    if (Tape* tape = common_tape({&m})) {
        const int nm = m.node();
        int node = tape->record(out.size(), [nm, segments, l, d](std::span<const double> g, Tape& t) {
            auto gm = t.grad_buffer(nm);
            const double inv = 1.0 / static_cast<double>(l);
            for (i64 s = 0; s < segments; ++s)
                for (i64 i = 0; i < l; ++i)
                    for (i64 j = 0; j < d; ++j)
                        gm[static_cast<size_t>((s * l + i) * d + j)] += g[static_cast<size_t>(s * d + j)] * inv;
        });
        out.attach(tape, node);
    }
    return out;
}

}  // namespace stf
