#include "kginject/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/optim.hpp"
#include "kginject/parallel.hpp"
#include "kginject/rng.hpp"
#include "kginject/seeds.hpp"

#include <spdlog/spdlog.h>

namespace kginject::lm {

void LMConfig::validate() const {
    if (vocab_size < 2 || dim < 1 || layers < 1 || heads < 1 || context < 2 || ff < 1)
        throw ValidationError("LM config dimensions must be positive");
    if (dim % heads != 0)
        throw ValidationError("LM dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
}

template <class T>
LMParams<T> LMParams<T>::zeros(const LMConfig& c) {
    c.validate();
    LMParams p;
    p.config = c;
    const std::size_t d = c.dim;
    p.tok_emb = Matrix<T>(c.vocab_size, d);
    p.pos_emb = Matrix<T>(c.context, d);
    p.layers.resize(c.layers);
    for (auto& w : p.layers) {
        w.ln1_g = Matrix<T>(1, d);
        w.ln1_b = Matrix<T>(1, d);
        w.w_qkv = Matrix<T>(d, 3 * d);
        w.b_qkv = Matrix<T>(1, 3 * d);
        w.w_proj = Matrix<T>(d, d);
        w.b_proj = Matrix<T>(1, d);
        w.ln2_g = Matrix<T>(1, d);
        w.ln2_b = Matrix<T>(1, d);
        w.w_fc = Matrix<T>(d, c.ff);
        w.b_fc = Matrix<T>(1, c.ff);
        w.w_out = Matrix<T>(c.ff, d);
        w.b_out = Matrix<T>(1, d);
    }
    p.lnf_g = Matrix<T>(1, d);
    p.lnf_b = Matrix<T>(1, d);
    p.head = Matrix<T>(d, c.vocab_size);
    return p;
}

template <class T>
std::size_t LMParams<T>::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
    return n;
}

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

template <class P, class M>
std::vector<M*> tensor_list(P& p) {
    std::vector<M*> out;
    p.visit([&](const std::string&, auto& m) { out.push_back(&m); });
    return out;
}

constexpr double kLnEps = 1e-5;

template <class T>
void layer_norm(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, Matrix<T>& xhat, Matrix<T>& y,
                std::vector<T>& rstd) {
    const std::size_t L = x.rows(), d = x.cols();
    xhat.resize(L, d);
    y.resize(L, d);
    rstd.assign(L, T{0});
    for (std::size_t i = 0; i < L; ++i) {
        const T* xr = x.data() + i * d;
        T mean{0};
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<T>(d);
        const T r = T{1} / std::sqrt(var + static_cast<T>(kLnEps));
        rstd[i] = r;
        T* xh = xhat.data() + i * d;
        T* yr = y.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (xr[j] - mean) * r;
            yr[j] = xh[j] * g.data()[j] + b.data()[j];
        }
    }
}

// dx += d(layer_norm)/dx applied to dy, rows r0 and later.
template <class T>
void layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const std::vector<T>& rstd, const Matrix<T>& g,
                         Matrix<T>& dx, Matrix<T>* dg, Matrix<T>* db, std::size_t r0) {
    const std::size_t L = dy.rows(), d = dy.cols();
    std::vector<T> dxhat(d);
    for (std::size_t i = r0; i < L; ++i) {
        const T* dyr = dy.data() + i * d;
        const T* xh = xhat.data() + i * d;
        T m1{0}, m2{0};
        for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dyr[j] * g.data()[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        T* dxr = dx.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dxr[j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
        if (dg) {
            for (std::size_t j = 0; j < d; ++j) {
                dg->data()[j] += dyr[j] * xh[j];
                db->data()[j] += dyr[j];
            }
        }
    }
}

template <class T>
void add_bias(Matrix<T>& y, const Matrix<T>& b, std::size_t r0 = 0) {
    for (std::size_t i = r0; i < y.rows(); ++i) {
        T* yr = y.data() + i * y.cols();
        for (std::size_t j = 0; j < y.cols(); ++j) yr[j] += b.data()[j];
    }
}

template <class T>
void bias_grad(const Matrix<T>& dy, Matrix<T>& db) {
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        const T* r = dy.data() + i * dy.cols();
        for (std::size_t j = 0; j < dy.cols(); ++j) db.data()[j] += r[j];
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <class T>
T gelu(T x) {
    const T th = std::tanh(static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x));
    return T{0.5} * x * (T{1} + th);
}

template <class T>
T gelu_grad(T x) {
    const T th = std::tanh(static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x));
    return T{0.5} * (T{1} + th) +
           T{0.5} * x * (T{1} - th * th) * static_cast<T>(kGeluC) * (T{1} + T{3} * static_cast<T>(kGeluA) * x * x);
}

void check_input(const LMConfig& c, std::size_t len, std::size_t width) {
    if (width != c.dim)
        throw ValidationError("input vector width " + std::to_string(width) + " does not match LM dim " +
                              std::to_string(c.dim));
    if (len == 0) throw ValidationError("empty input sequence");
    if (len > c.context)
        throw ValidationError("sequence length " + std::to_string(len) + " exceeds context " + std::to_string(c.context) +
                              " (required <= " + std::to_string(c.context) + ", actual " + std::to_string(len) + ")");
}

}  // namespace

template <class T>
LMParams<T> init_lm(const LMConfig& config, std::uint64_t seed) {
    auto p = LMParams<T>::zeros(config);
    Rng rng(seed);
    const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config.layers));
    p.visit([&](const std::string& name, Matrix<T>& m) {
        if (ends_with(name, "_g")) {
            m.fill(T{1});
        } else if (ends_with(name, "_b") || name.find(".b_") != std::string::npos) {
            m.fill(T{0});
        } else {
            const double sd = (ends_with(name, "w_proj") || ends_with(name, "w_out")) ? resid_std : 0.02;
            for (auto& v : m.flat()) v = static_cast<T>(rng.normal(0.0, sd));
        }
    });
    return p;
}

template <class T, class U>
static LMParams<T> cast_impl(const LMParams<U>& src) {
    auto dst = LMParams<T>::zeros(src.config);
    auto s = tensor_list<const LMParams<U>, const Matrix<U>>(src);
    auto d = tensor_list<LMParams<T>, Matrix<T>>(dst);
    for (std::size_t i = 0; i < s.size(); ++i) *d[i] = s[i]->template cast<T>();
    return dst;
}

template <class T>
LMParams<T> cast_params(const LMParams<double>& p) {
    return cast_impl<T>(p);
}
template <class T>
LMParams<T> cast_params(const LMParams<float>& p) {
    return cast_impl<T>(p);
}

template <class T>
Matrix<T> embedding_rows(const LMParams<T>& params, std::span<const TokenId> ids) {
    const std::size_t d = params.config.dim;
    Matrix<T> out(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= params.config.vocab_size)
            throw ValidationError("token id " + std::to_string(ids[i]) + " outside vocabulary");
        std::copy_n(params.tok_emb.row(static_cast<std::size_t>(ids[i])).data(), d, out.row(i).data());
    }
    return out;
}

template <class T>
Trace<T> forward_trace(const LMParams<T>& params, const Matrix<T>& vectors, std::size_t logit_row0) {
    const auto& c = params.config;
    check_input(c, vectors.rows(), vectors.cols());
    const std::size_t L = vectors.rows(), d = c.dim, H = c.heads, hd = c.head_dim();
    if (logit_row0 > L) throw ValidationError("logit row beyond sequence");

    Trace<T> tr;
    tr.len = L;
    tr.logit_row0 = logit_row0;
    Matrix<T> x(L, d);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < d; ++j) x(i, j) = vectors(i, j) + params.pos_emb(i, j);

    const T scale = T{1} / std::sqrt(static_cast<T>(hd));
    Matrix<T> y;
    tr.layers.resize(c.layers);
    for (std::size_t l = 0; l < c.layers; ++l) {
        const auto& w = params.layers[l];
        auto& lt = tr.layers[l];

        layer_norm(x, w.ln1_g, w.ln1_b, lt.xhat1, lt.ln1, lt.rstd1);
        matmul(lt.ln1, w.w_qkv, lt.qkv);
        add_bias(lt.qkv, w.b_qkv);

        lt.probs.resize(H * L, L);
        lt.att.resize(L, d);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < L; ++t) {
                T* p = lt.probs.data() + (h * L + t) * L;
                const T* q = lt.qkv.data() + t * 3 * d + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    const T* k = lt.qkv.data() + s * 3 * d + d + h * hd;
                    T dot{0};
                    for (std::size_t j = 0; j < hd; ++j) dot += q[j] * k[j];
                    p[s] = dot * scale;
                    mx = std::max(mx, p[s]);
                }
                T sum{0};
                for (std::size_t s = 0; s <= t; ++s) {
                    p[s] = std::exp(p[s] - mx);
                    sum += p[s];
                }
                T* o = lt.att.data() + t * d + h * hd;
                for (std::size_t s = 0; s <= t; ++s) {
                    p[s] /= sum;
                    const T* v = lt.qkv.data() + s * 3 * d + 2 * d + h * hd;
                    for (std::size_t j = 0; j < hd; ++j) o[j] += p[s] * v[j];
                }
            }
        }
        matmul(lt.att, w.w_proj, y);
        add_bias(y, w.b_proj);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += y.data()[i];

        layer_norm(x, w.ln2_g, w.ln2_b, lt.xhat2, lt.ln2, lt.rstd2);
        matmul(lt.ln2, w.w_fc, lt.fc);
        add_bias(lt.fc, w.b_fc);
        lt.act.resize(L, c.ff);
        for (std::size_t i = 0; i < lt.fc.size(); ++i) lt.act.data()[i] = gelu(lt.fc.data()[i]);
        matmul(lt.act, w.w_out, y);
        add_bias(y, w.b_out);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += y.data()[i];
    }
    layer_norm(x, params.lnf_g, params.lnf_b, tr.xhatf, tr.hidden, tr.rstdf);

    Matrix<T> rows(L - logit_row0, d);
    std::copy_n(tr.hidden.data() + logit_row0 * d, rows.size(), rows.data());
    matmul(rows, params.head, tr.logits);
    return tr;
}

template <class T>
TransposedWeights<T>::TransposedWeights(const LMParams<T>& p) : head(transpose(p.head)) {
    for (const auto& w : p.layers) {
        qkv.push_back(transpose(w.w_qkv));
        proj.push_back(transpose(w.w_proj));
        fc.push_back(transpose(w.w_fc));
        out.push_back(transpose(w.w_out));
    }
}

template <class T>
Matrix<T> backward(const LMParams<T>& params, const TransposedWeights<T>& tw, const Trace<T>& tr,
                   const Matrix<T>& dlogits, std::type_identity_t<LMParams<T>>* grads, std::size_t grad_row0) {
    const auto& c = params.config;
    const std::size_t L = tr.len, d = c.dim, H = c.heads, hd = c.head_dim(), V = c.vocab_size;
    const std::size_t r0 = tr.logit_row0;
    if (dlogits.rows() != L - r0 || dlogits.cols() != V) throw ValidationError("dlogits shape mismatch");
    const std::size_t g0 = grads ? 0 : std::min(grad_row0, L);

    // Output head.
    Matrix<T> dh(L, d);
    const std::size_t nl = L - r0;
    gemm(nl, d, V, dlogits.data(), V, 1, tw.head.data(), d, dh.data() + r0 * d, d, false);
    if (grads) gemm(d, V, nl, tr.hidden.data() + r0 * d, 1, d, dlogits.data(), V, grads->head.data(), V, true);
    Matrix<T> dx(L, d);
    layer_norm_backward(dh, tr.xhatf, tr.rstdf, params.lnf_g, dx, grads ? &grads->lnf_g : nullptr,
                        grads ? &grads->lnf_b : nullptr, std::max(g0, std::size_t{0}));

    const T scale = T{1} / std::sqrt(static_cast<T>(hd));
    Matrix<T> d_act(L, c.ff), d_ln2(L, d), d_att(L, d), d_qkv(L, 3 * d), d_ln1(L, d);
    std::vector<T> dp(L);
    for (std::size_t li = c.layers; li-- > 0;) {
        const auto& w = params.layers[li];
        const auto& lt = tr.layers[li];
        LayerWeights<T>* gw = grads ? &grads->layers[li] : nullptr;

        // Feed-forward block; dx is the gradient w.r.t. the block output.
        matmul_rows(dx, tw.out[li], d_act, g0);
        if (gw) {
            bias_grad(dx, gw->b_out);
            matmul_tn_acc(lt.act, dx, gw->w_out);
        }
        for (std::size_t i = g0; i < L; ++i)
            for (std::size_t j = 0; j < c.ff; ++j) d_act(i, j) *= gelu_grad(lt.fc(i, j));
        if (gw) {
            bias_grad(d_act, gw->b_fc);
            matmul_tn_acc(lt.ln2, d_act, gw->w_fc);
        }
        matmul_rows(d_act, tw.fc[li], d_ln2, g0);
        layer_norm_backward(d_ln2, lt.xhat2, lt.rstd2, w.ln2_g, dx, gw ? &gw->ln2_g : nullptr,
                            gw ? &gw->ln2_b : nullptr, g0);

        // Attention block.
        matmul_rows(dx, tw.proj[li], d_att, g0);
        if (gw) {
            bias_grad(dx, gw->b_proj);
            matmul_tn_acc(lt.att, dx, gw->w_proj);
        }
        d_qkv.fill(T{0});
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = g0; t < L; ++t) {
                const T* p = lt.probs.data() + (h * L + t) * L;
                const T* da = d_att.data() + t * d + h * hd;
                T dot{0};
                for (std::size_t s = 0; s <= t; ++s) {
                    const T* v = lt.qkv.data() + s * 3 * d + 2 * d + h * hd;
                    T acc{0};
                    for (std::size_t j = 0; j < hd; ++j) acc += da[j] * v[j];
                    dp[s] = acc;
                    dot += p[s] * acc;
                }
                const T* q = lt.qkv.data() + t * 3 * d + h * hd;
                T* dq = d_qkv.data() + t * 3 * d + h * hd;
                for (std::size_t s = 0; s <= t; ++s) {
                    const T ds = p[s] * (dp[s] - dot) * scale;
                    const T* k = lt.qkv.data() + s * 3 * d + d + h * hd;
                    for (std::size_t j = 0; j < hd; ++j) dq[j] += ds * k[j];
                    if (s < g0) continue;
                    T* dk = d_qkv.data() + s * 3 * d + d + h * hd;
                    T* dv = d_qkv.data() + s * 3 * d + 2 * d + h * hd;
                    for (std::size_t j = 0; j < hd; ++j) {
                        dk[j] += ds * q[j];
                        dv[j] += p[s] * da[j];
                    }
                }
            }
        }
        if (gw) {
            bias_grad(d_qkv, gw->b_qkv);
            matmul_tn_acc(lt.ln1, d_qkv, gw->w_qkv);
        }
        matmul_rows(d_qkv, tw.qkv[li], d_ln1, g0);
        layer_norm_backward(d_ln1, lt.xhat1, lt.rstd1, w.ln1_g, dx, gw ? &gw->ln1_g : nullptr,
                            gw ? &gw->ln1_b : nullptr, g0);
    }

    if (grads)
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < d; ++j) grads->pos_emb(i, j) += dx(i, j);
    for (std::size_t i = 0; i < std::min(grad_row0, L); ++i)
        for (std::size_t j = 0; j < d; ++j) dx(i, j) = T{0};
    return dx;
}

template <class T>
LMOutput<T> forward_embeddings(const LMParams<T>& params, const Matrix<T>& vectors) {
    auto tr = forward_trace(params, vectors, 0);
    return {std::move(tr.logits), std::move(tr.hidden)};
}

template <class T>
LMOutput<T> forward_tokens(const LMParams<T>& params, std::span<const TokenId> ids) {
    if (ids.size() > params.config.context)
        throw ValidationError("sequence length exceeds context (required <= " + std::to_string(params.config.context) +
                              ", actual " + std::to_string(ids.size()) + ")");
    return forward_embeddings(params, embedding_rows(params, ids));
}

template <class T>
std::vector<T> log_softmax(std::span<const T> logits) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : logits) mx = std::max(mx, v);
    T sum{0};
    for (T v : logits) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    std::vector<T> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

template <class T>
Matrix<T> embed_label(const LMParams<T>& params, const Tokenizer& tokenizer, std::string_view label) {
    const auto ids = tokenizer.encode(label);
    if (ids.empty()) throw ValidationError("label '" + std::string(label) + "' tokenizes to zero ids");
    const auto out = forward_tokens(params, std::span<const TokenId>(ids));
    const std::size_t d = params.config.dim;
    Matrix<T> mean(1, d);
    for (std::size_t i = 0; i < out.hidden.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) mean(0, j) += out.hidden(i, j);
    for (std::size_t j = 0; j < d; ++j) mean(0, j) /= static_cast<T>(out.hidden.rows());
    return mean;
}

// ---------------------------------------------------------------------------
// TLM1 container

namespace {
constexpr char kMagic[4] = {'T', 'L', 'M', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize(const LMParams<float>& params) {
    ByteWriter w;
    w.put_string(std::string_view(kMagic, 4));
    w.put<std::uint32_t>(kVersion);
    const auto& c = params.config;
    for (std::size_t v : {c.vocab_size, c.dim, c.layers, c.heads, c.context, c.ff}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    std::uint32_t count = 0;
    params.visit([&](const std::string&, const Matrix<float>&) { ++count; });
    w.put<std::uint32_t>(count);
    params.visit([&](const std::string& name, const Matrix<float>& m) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.put_string(name);
        w.put<std::uint32_t>(2);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
        w.put_f32(m.flat());
    });
    return w.take();
}

LMParams<float> deserialize_lm(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    if (r.get_string(4) != std::string_view(kMagic, 4)) throw ParseError("not a TLM1 file (bad magic)");
    if (const auto v = r.get<std::uint32_t>(); v != kVersion) throw ParseError("unsupported TLM1 version " + std::to_string(v));
    LMConfig c;
    c.vocab_size = r.get<std::uint32_t>();
    c.dim = r.get<std::uint32_t>();
    c.layers = r.get<std::uint32_t>();
    c.heads = r.get<std::uint32_t>();
    c.context = r.get<std::uint32_t>();
    c.ff = r.get<std::uint32_t>();
    LMParams<float> p;
    try {
        p = LMParams<float>::zeros(c);
    } catch (const ValidationError& e) {
        throw ParseError(std::string("invalid TLM1 config: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    std::uint32_t expected = 0;
    p.visit([&](const std::string&, const Matrix<float>&) { ++expected; });
    if (count != expected) throw ParseError("TLM1 tensor count " + std::to_string(count) + ", expected " + std::to_string(expected));
    p.visit([&](const std::string& name, Matrix<float>& m) {
        const auto len = r.get<std::uint32_t>();
        const std::string got = r.get_string(len);
        if (got != name) throw ParseError("TLM1 tensor '" + got + "' found where '" + name + "' was expected");
        const auto rank = r.get<std::uint32_t>();
        if (rank != 2) throw ParseError("TLM1 tensor " + name + " has rank " + std::to_string(rank));
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        if (rows != m.rows() || cols != m.cols()) throw ParseError("TLM1 tensor " + name + " has the wrong shape");
        r.get_f32(m.flat());
    });
    if (r.remaining() != 0) throw ParseError("trailing bytes after TLM1 tensors");
    return p;
}

void save_lm(const LMParams<float>& params, const std::filesystem::path& path) {
    write_file_bytes(path, serialize(params));
}

LMParams<float> load_lm(const std::filesystem::path& path) { return deserialize_lm(read_file_bytes(path)); }

Digest fingerprint(const LMParams<float>& params) { return sha256(serialize(params)); }

// ---------------------------------------------------------------------------
// Pretraining

namespace {

struct SeqLoss {
    double loss_sum = 0.0;
    std::size_t tokens = 0;
};

SeqLoss sequence_loss(const LMParams<float>& p, const TransposedWeights<float>* tw, std::span<const TokenId> seq,
                      LMParams<float>* grads, double grad_scale) {
    const std::size_t L = seq.size() - 1;
    const auto inputs = embedding_rows(p, seq.first(L));
    const auto tr = forward_trace(p, inputs, 0);
    const std::size_t V = p.config.vocab_size;
    Matrix<float> dlogits(grads ? L : 0, grads ? V : 0);
    SeqLoss out;
    for (std::size_t t = 0; t < L; ++t) {
        const auto ls = log_softmax<float>(tr.logits.row(t));
        const auto target = static_cast<std::size_t>(seq[t + 1]);
        out.loss_sum -= static_cast<double>(ls[target]);
        if (grads) {
            for (std::size_t v = 0; v < V; ++v)
                dlogits(t, v) = static_cast<float>(std::exp(static_cast<double>(ls[v])) * grad_scale);
            dlogits(t, target) -= static_cast<float>(grad_scale);
        }
    }
    out.tokens = L;
    if (grads) {
        const auto dx = backward(p, *tw, tr, dlogits, grads, 0);
        for (std::size_t t = 0; t < L; ++t) {
            auto row = grads->tok_emb.row(static_cast<std::size_t>(seq[t]));
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += dx(t, j);
        }
    }
    return out;
}

}  // namespace

double mean_sequence_loss(const LMParams<float>& params, const std::vector<std::vector<TokenId>>& sequences,
                          unsigned threads) {
    std::vector<SeqLoss> parts(sequences.size());
    parallel_for(sequences.size(), threads,
                 [&](std::size_t i) { parts[i] = sequence_loss(params, nullptr, sequences[i], nullptr, 0.0); });
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : parts) {
        sum += p.loss_sum;
        n += p.tokens;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

PretrainResult pretrain(const LMConfig& config, const std::vector<std::vector<TokenId>>& sequences,
                        const PretrainConfig& train) {
    config.validate();
    if (sequences.empty()) throw ValidationError("pretraining corpus is empty");
    std::size_t total_tokens = 0;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const auto& s = sequences[i];
        if (s.size() < 2) throw ValidationError("pretraining sequence " + std::to_string(i) + " has fewer than 2 tokens");
        if (s.size() - 1 > config.context)
            throw ValidationError("pretraining sequence " + std::to_string(i) + " does not fit the context (required <= " +
                                  std::to_string(config.context + 1) + " tokens, actual " + std::to_string(s.size()) + ")");
        total_tokens += s.size() - 1;
    }

    PretrainResult result{init_lm<float>(config, train.seed), {}};
    auto& params = result.params;

    std::vector<std::size_t> eval_idx(sequences.size());
    std::iota(eval_idx.begin(), eval_idx.end(), 0);
    Rng eval_rng(mix_seed(train.seed, 0xE7A1));
    eval_rng.shuffle(eval_idx);
    eval_idx.resize(std::min(eval_idx.size(), train.eval_sequences));
    std::vector<std::vector<TokenId>> eval_set;
    for (auto i : eval_idx) eval_set.push_back(sequences[i]);
    result.report.initial_perplexity = std::exp(mean_sequence_loss(params, eval_set, train.threads));

    std::vector<AdamW<float>::Slot> slots;
    params.visit([&](const std::string&, Matrix<float>& m) { slots.push_back({m.flat(), m.rows() > 1}); });
    AdamW<float> opt(std::move(slots), {train.learning_rate, train.weight_decay, 0.9, 0.999, 1e-8});

    const std::size_t B = std::max<std::size_t>(1, train.batch_size);
    const std::size_t steps_per_epoch = (sequences.size() + B - 1) / B;
    const std::size_t total_steps = steps_per_epoch * train.epochs;
    std::vector<LMParams<float>> slot_grads(B, LMParams<float>::zeros(config));
    auto total = LMParams<float>::zeros(config);
    std::vector<double> slot_loss(B);
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
        std::vector<std::size_t> order(sequences.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix_seed(train.seed, epoch + 1));
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t epoch_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t n = std::min(B, order.size() - start);
            const TransposedWeights<float> tw(params);
            parallel_for(n, train.threads, [&](std::size_t i) {
                auto& g = slot_grads[i];
                g.visit([](const std::string&, Matrix<float>& m) { m.fill(0.0f); });
                const auto& seq = sequences[order[start + i]];
                const auto r = sequence_loss(params, &tw, seq, &g, 1.0 / static_cast<double>(seq.size() - 1));
                slot_loss[i] = r.loss_sum / static_cast<double>(r.tokens);
            });
            double batch_loss = 0.0;
            total.visit([](const std::string&, Matrix<float>& m) { m.fill(0.0f); });
            auto dst = tensor_list<LMParams<float>, Matrix<float>>(total);
            const float inv = 1.0f / static_cast<float>(n);
            for (std::size_t i = 0; i < n; ++i) {
                batch_loss += slot_loss[i];
                auto src = tensor_list<LMParams<float>, Matrix<float>>(slot_grads[i]);
                for (std::size_t k = 0; k < dst.size(); ++k) {
                    float* dd = dst[k]->data();
                    const float* ss = src[k]->data();
                    for (std::size_t e = 0; e < dst[k]->size(); ++e) dd[e] += ss[e] * inv;
                }
            }
            batch_loss /= static_cast<double>(n);
            if (!std::isfinite(batch_loss)) {
                std::ostringstream msg;
                msg << "pretraining diverged at epoch " << epoch + 1 << " step " << step << " (loss " << batch_loss
                    << "); batch sequence indices:";
                for (std::size_t i = 0; i < n; ++i) msg << ' ' << order[start + i];
                throw Error(msg.str());
            }
            epoch_loss += batch_loss;
            ++epoch_batches;

            double lr = train.learning_rate;
            if (step < train.warmup_steps) {
                lr *= static_cast<double>(step + 1) / static_cast<double>(train.warmup_steps);
            } else if (total_steps > train.warmup_steps) {
                const double progress = static_cast<double>(step - train.warmup_steps) /
                                        static_cast<double>(total_steps - train.warmup_steps);
                const double cosine = 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
                lr *= train.min_lr_ratio + (1.0 - train.min_lr_ratio) * cosine;
            }
            std::vector<std::span<const float>> gspans;
            for (auto* m : dst) gspans.emplace_back(m->flat());
            opt.step(gspans, lr);
            ++step;
        }
        result.report.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_batches)));
        spdlog::info("pretrain: epoch {}/{} mean loss {:.4f}", epoch + 1, train.epochs, result.report.epoch_loss.back());
    }

    result.report.final_perplexity = std::exp(mean_sequence_loss(params, eval_set, train.threads));
    result.report.sequences = sequences.size();
    result.report.tokens = total_tokens;
    result.report.fingerprint = to_hex(fingerprint(params));
    return result;
}

#define KGINJECT_INSTANTIATE(T)                                                                               \
    template struct LMParams<T>;                                                                              \
    template struct TransposedWeights<T>;                                                                     \
    template LMParams<T> init_lm<T>(const LMConfig&, std::uint64_t);                                          \
    template LMParams<T> cast_params<T>(const LMParams<double>&);                                             \
    template LMParams<T> cast_params<T>(const LMParams<float>&);                                              \
    template Matrix<T> embedding_rows<T>(const LMParams<T>&, std::span<const TokenId>);                       \
    template LMOutput<T> forward_tokens<T>(const LMParams<T>&, std::span<const TokenId>);                     \
    template LMOutput<T> forward_embeddings<T>(const LMParams<T>&, const Matrix<T>&);                         \
    template Trace<T> forward_trace<T>(const LMParams<T>&, const Matrix<T>&, std::size_t);                    \
    template Matrix<T> backward<T>(const LMParams<T>&, const TransposedWeights<T>&, const Trace<T>&,          \
                                   const Matrix<T>&, LMParams<T>*, std::size_t);                              \
    template std::vector<T> log_softmax<T>(std::span<const T>);                                               \
    template Matrix<T> embed_label<T>(const LMParams<T>&, const Tokenizer&, std::string_view);

KGINJECT_INSTANTIATE(float)
KGINJECT_INSTANTIATE(double)

}  // namespace kginject::lm
