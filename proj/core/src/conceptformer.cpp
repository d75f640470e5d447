#include "kginject/conceptformer.hpp"

#include <cmath>
#include <limits>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/rng.hpp"

namespace kginject::cf {

template <class T>
void EmbeddedSubgraph<T>::validate(std::size_t dim_i) const {
    if (N.rows() == 0) throw ValidationError("empty neighborhood");
    if (C.rows() != 1 || C.cols() != dim_i || N.cols() != dim_i || E.cols() != dim_i)
        throw ValidationError("subgraph embedding width does not match dim_i " + std::to_string(dim_i));
    if (E.rows() != N.rows()) throw ValidationError("neighbor and edge matrices have different row counts");
    if (!neighbor_qids.empty() && neighbor_qids.size() != N.rows())
        throw ValidationError("neighbor qid list does not match neighbor count");
    if (!all_finite(C) || !all_finite(N) || !all_finite(E)) throw ValidationError("non-finite subgraph embedding");
}

template <class T>
CFParams<T> CFParams<T>::zeros(std::size_t dim_i, std::size_t dim_o, std::size_t n, std::size_t hidden, double slope) {
    if (dim_i < 1 || dim_o < 1 || n < 1 || hidden < 1) throw ValidationError("ConceptFormer dimensions must be >= 1");
    if (!(slope > 0.0 && slope < 1.0)) throw ValidationError("LeakyReLU slope must lie in (0, 1)");
    CFParams p;
    p.dim_i = dim_i;
    p.dim_o = dim_o;
    p.hidden = hidden;
    p.slope = slope;
    for (std::size_t b = 0; b < n; ++b) {
        p.wq.emplace_back(dim_i, dim_i);
        p.wk.emplace_back(dim_i, dim_i);
        p.wv.emplace_back(dim_i, dim_i);
        p.wo.emplace_back(dim_i, dim_i);
    }
    p.wp1 = Matrix<T>(dim_i, hidden);
    p.wp2 = Matrix<T>(hidden, dim_o);
    return p;
}

template <class T>
std::size_t CFParams<T>::parameter_count() const {
    std::size_t c = 0;
    visit([&](const std::string&, const Matrix<T>& m) { c += m.size(); });
    return c;
}

template <class T>
CFParams<T> init_params(std::size_t dim_i, std::size_t dim_o, std::size_t n, std::size_t hidden, double slope,
                        std::uint64_t seed) {
    auto p = CFParams<T>::zeros(dim_i, dim_o, n, hidden, slope);
    Rng rng(seed);
    p.visit([&](const std::string&, Matrix<T>& m) {
        const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
        for (auto& v : m.flat()) v = static_cast<T>(rng.uniform(-a, a));
    });
    return p;
}

template <class T, class U>
CFParams<T> cast_params(const CFParams<U>& p) {
    auto out = CFParams<T>::zeros(p.dim_i, p.dim_o, p.n(), p.hidden, p.slope);
    std::vector<const Matrix<U>*> src;
    p.visit([&](const std::string&, const Matrix<U>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Matrix<T>& m) { m = src[i++]->template cast<T>(); });
    return out;
}

namespace {

// Activations of one block.
template <class T>
struct BlockTrace {
    std::vector<T> q, u, o, h, z;  // u = attention-weighted values before Wo
    Matrix<T> K, V;
    std::vector<T> a;
};

// y[j] = sum_k x[k] * W(k, j)
template <class T>
void vec_mat(const std::vector<T>& x, const Matrix<T>& w, std::vector<T>& y) {
    y.assign(w.cols(), T{0});
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const T xv = x[k];
        const T* wr = w.data() + k * w.cols();
        for (std::size_t j = 0; j < w.cols(); ++j) y[j] += xv * wr[j];
    }
}

// y[k] = sum_j W(k, j) * x[j]
template <class T>
void mat_vec(const Matrix<T>& w, const std::vector<T>& x, std::vector<T>& y) {
    y.assign(w.rows(), T{0});
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const T* wr = w.data() + k * w.cols();
        T acc{0};
        for (std::size_t j = 0; j < w.cols(); ++j) acc += wr[j] * x[j];
        y[k] = acc;
    }
}

// W += a^T b for row vectors a, b.
template <class T>
void outer_acc(const std::vector<T>& a, const std::vector<T>& b, Matrix<T>& w) {
    for (std::size_t k = 0; k < a.size(); ++k) {
        const T av = a[k];
        T* wr = w.data() + k * w.cols();
        for (std::size_t j = 0; j < b.size(); ++j) wr[j] += av * b[j];
    }
}

template <class T>
void run_block(const CFParams<T>& p, const EmbeddedSubgraph<T>& g, std::size_t b, BlockTrace<T>& tr) {
    const std::size_t d = p.dim_i, m = g.m();
    const std::vector<T> c(g.C.data(), g.C.data() + d);
    vec_mat(c, p.wq[b], tr.q);
    matmul(g.N, p.wk[b], tr.K);
    for (std::size_t i = 0; i < tr.K.size(); ++i) tr.K.data()[i] += g.E.data()[i];
    matmul(g.N, p.wv[b], tr.V);

    const T scale = T{1} / std::sqrt(static_cast<T>(d));
    tr.a.assign(m, T{0});
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
        T s{0};
        for (std::size_t k = 0; k < d; ++k) s += tr.q[k] * tr.K(j, k);
        tr.a[j] = s * scale;
        mx = std::max(mx, tr.a[j]);
    }
    T sum{0};
    for (std::size_t j = 0; j < m; ++j) {
        tr.a[j] = std::exp(tr.a[j] - mx);
        sum += tr.a[j];
    }
    for (auto& v : tr.a) v /= sum;

    tr.u.assign(d, T{0});
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < d; ++k) tr.u[k] += tr.a[j] * tr.V(j, k);
    vec_mat(tr.u, p.wo[b], tr.o);
    vec_mat(tr.o, p.wp1, tr.h);
    const T slope = static_cast<T>(p.slope);
    tr.z.resize(tr.h.size());
    for (std::size_t k = 0; k < tr.h.size(); ++k) tr.z[k] = tr.h[k] > T{0} ? tr.h[k] : slope * tr.h[k];
}

template <class T>
void check_params(const CFParams<T>& p) {
    if (p.n() == 0) throw ValidationError("ConceptFormer has no blocks");
}

template <class T>
void backward_block(const CFParams<T>& p, const EmbeddedSubgraph<T>& g, std::size_t b, const BlockTrace<T>& tr,
                    std::span<const T> dy, CFParams<T>& gp, Matrix<T>* dC, Matrix<T>* dN, Matrix<T>* dE) {
    const std::size_t d = p.dim_i, m = g.m();
    const std::vector<T> dyv(dy.begin(), dy.end());
    outer_acc(tr.z, dyv, gp.wp2);
    std::vector<T> dz, dh(tr.h.size()), dO, du;
    mat_vec(p.wp2, dyv, dz);
    const T slope = static_cast<T>(p.slope);
    for (std::size_t k = 0; k < dh.size(); ++k) dh[k] = dz[k] * (tr.h[k] > T{0} ? T{1} : slope);
    outer_acc(tr.o, dh, gp.wp1);
    mat_vec(p.wp1, dh, dO);
    outer_acc(tr.u, dO, gp.wo[b]);
    mat_vec(p.wo[b], dO, du);

    std::vector<T> da(m);
    T dot{0};
    for (std::size_t j = 0; j < m; ++j) {
        T s{0};
        for (std::size_t k = 0; k < d; ++k) s += du[k] * tr.V(j, k);
        da[j] = s;
        dot += tr.a[j] * s;
    }
    const T scale = T{1} / std::sqrt(static_cast<T>(d));
    Matrix<T> dK(m, d), dV(m, d);
    std::vector<T> dq(d, T{0});
    for (std::size_t j = 0; j < m; ++j) {
        const T ds = tr.a[j] * (da[j] - dot) * scale;
        for (std::size_t k = 0; k < d; ++k) {
            dq[k] += ds * tr.K(j, k);
            dK(j, k) = ds * tr.q[k];
            dV(j, k) = tr.a[j] * du[k];
        }
    }
    const std::vector<T> c(g.C.data(), g.C.data() + d);
    outer_acc(c, dq, gp.wq[b]);
    matmul_tn_acc(g.N, dK, gp.wk[b]);
    matmul_tn_acc(g.N, dV, gp.wv[b]);
    if (dC) {
        std::vector<T> t;
        mat_vec(p.wq[b], dq, t);
        for (std::size_t k = 0; k < d; ++k) (*dC)(0, k) += t[k];
        const auto wkT = transpose(p.wk[b]);
        const auto wvT = transpose(p.wv[b]);
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t k = 0; k < d; ++k) {
                T acc{0};
                for (std::size_t l = 0; l < d; ++l) acc += dK(j, l) * wkT(l, k) + dV(j, l) * wvT(l, k);
                (*dN)(j, k) += acc;
                (*dE)(j, k) += dK(j, k);
            }
        }
    }
}

}  // namespace

template <class T>
ForwardResult<T> forward(const CFParams<T>& params, const EmbeddedSubgraph<T>& g) {
    check_params(params);
    g.validate(params.dim_i);
    ForwardResult<T> out{Matrix<T>(params.n(), params.dim_o), Matrix<T>(params.n(), g.m())};
    BlockTrace<T> tr;
    for (std::size_t b = 0; b < params.n(); ++b) {
        run_block(params, g, b, tr);
        std::vector<T> y;
        vec_mat(tr.z, params.wp2, y);
        std::copy(y.begin(), y.end(), out.vectors.row(b).begin());
        std::copy(tr.a.begin(), tr.a.end(), out.attention.row(b).begin());
    }
    return out;
}

template <class T>
Gradients<T> gradients(const CFParams<T>& params, const EmbeddedSubgraph<T>& g, const Matrix<T>& upstream) {
    check_params(params);
    g.validate(params.dim_i);
    if (upstream.rows() != params.n() || upstream.cols() != params.dim_o)
        throw ValidationError("upstream cotangent must be n x dim_o");
    Gradients<T> out{CFParams<T>::zeros(params.dim_i, params.dim_o, params.n(), params.hidden, params.slope),
                     Matrix<T>(1, params.dim_i), Matrix<T>(g.m(), params.dim_i), Matrix<T>(g.m(), params.dim_i)};
    BlockTrace<T> tr;
    for (std::size_t b = 0; b < params.n(); ++b) {
        run_block(params, g, b, tr);
        backward_block<T>(params, g, b, tr, upstream.row(b), out.params, &out.dC, &out.dN, &out.dE);
    }
    return out;
}

template <class T>
void accumulate_gradients(const CFParams<T>& params, const EmbeddedSubgraph<T>& g, const Matrix<T>& upstream,
                          CFParams<T>& acc) {
    check_params(params);
    g.validate(params.dim_i);
    if (upstream.rows() != params.n() || upstream.cols() != params.dim_o)
        throw ValidationError("upstream cotangent must be n x dim_o");
    BlockTrace<T> tr;
    for (std::size_t b = 0; b < params.n(); ++b) {
        run_block(params, g, b, tr);
        backward_block<T>(params, g, b, tr, upstream.row(b), acc, nullptr, nullptr, nullptr);
    }
}

template <class T>
AttentionReport attention_report(const CFParams<T>& params, const EmbeddedSubgraph<T>& g) {
    const auto fr = forward(params, g);
    AttentionReport r;
    r.neighbor_qids = g.neighbor_qids;
    r.weights = fr.attention.template cast<double>();
    return r;
}

// ---------------------------------------------------------------------------
// CFP1 container

namespace {
constexpr char kMagic[4] = {'C', 'F', 'P', '1'};
}

std::vector<std::uint8_t> serialize(const CFParams<float>& params) {
    ByteWriter w;
    w.put_string(std::string_view(kMagic, 4));
    for (std::size_t v : {params.dim_i, params.dim_o, params.n(), params.hidden})
        w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    w.put<float>(static_cast<float>(params.slope));
    params.visit([&](const std::string&, const Matrix<float>& m) { w.put_f32(m.flat()); });
    return w.take();
}

CFParams<float> deserialize_cf(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    if (r.get_string(4) != std::string_view(kMagic, 4)) throw ParseError("not a CFP1 file (bad magic)");
    const auto dim_i = r.get<std::uint32_t>();
    const auto dim_o = r.get<std::uint32_t>();
    const auto n = r.get<std::uint32_t>();
    const auto hidden = r.get<std::uint32_t>();
    const auto slope = r.get<float>();
    CFParams<float> p;
    try {
        p = CFParams<float>::zeros(dim_i, dim_o, n, hidden, slope);
    } catch (const ValidationError& e) {
        throw ParseError(std::string("invalid CFP1 header: ") + e.what());
    }
    p.visit([&](const std::string&, Matrix<float>& m) { r.get_f32(m.flat()); });
    if (r.remaining() != 0) throw ParseError("trailing bytes after CFP1 tensors");
    p.visit([&](const std::string& name, const Matrix<float>& m) {
        if (!all_finite(m)) throw ParseError("CFP1 tensor " + name + " contains non-finite values");
    });
    return p;
}

void save_cf(const CFParams<float>& params, const std::filesystem::path& path) {
    write_file_bytes(path, serialize(params));
}

CFParams<float> load_cf(const std::filesystem::path& path) { return deserialize_cf(read_file_bytes(path)); }

Digest fingerprint(const CFParams<float>& params) { return sha256(serialize(params)); }

ConceptVectors generate(const CFParams<float>& params, const EmbeddedSubgraph<float>& g, std::string center_qid) {
    auto fr = forward(params, g);
    if (!all_finite(fr.vectors)) throw ValidationError("non-finite concept vectors for " + center_qid);
    return {std::move(center_qid), to_hex(fingerprint(params)), std::move(fr.vectors)};
}

#define KGINJECT_CF_INSTANTIATE(T)                                                                          \
    template struct EmbeddedSubgraph<T>;                                                                    \
    template struct CFParams<T>;                                                                            \
    template CFParams<T> init_params<T>(std::size_t, std::size_t, std::size_t, std::size_t, double,         \
                                        std::uint64_t);                                                     \
    template ForwardResult<T> forward<T>(const CFParams<T>&, const EmbeddedSubgraph<T>&);                   \
    template Gradients<T> gradients<T>(const CFParams<T>&, const EmbeddedSubgraph<T>&, const Matrix<T>&);   \
    template void accumulate_gradients<T>(const CFParams<T>&, const EmbeddedSubgraph<T>&, const Matrix<T>&, \
                                          CFParams<T>&);                                                    \
    template AttentionReport attention_report<T>(const CFParams<T>&, const EmbeddedSubgraph<T>&);

KGINJECT_CF_INSTANTIATE(float)
KGINJECT_CF_INSTANTIATE(double)
template CFParams<float> cast_params<float, double>(const CFParams<double>&);
template CFParams<double> cast_params<double, float>(const CFParams<float>&);
template CFParams<float> cast_params<float, float>(const CFParams<float>&);
template CFParams<double> cast_params<double, double>(const CFParams<double>&);

}  // namespace kginject::cf
