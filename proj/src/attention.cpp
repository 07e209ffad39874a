#include "m2/attention.hpp"

#include <cmath>
#include <limits>

namespace m2 {

AttentionMask AttentionMask::padding(const std::vector<std::uint8_t>& key_valid, std::size_t n_queries) {
  AttentionMask m;
  m.kind_ = MaskKind::Padding;
  m.n_q_ = n_queries;
  m.n_k_ = key_valid.size();
  m.valid_.resize(n_queries * key_valid.size());
  for (std::size_t q = 0; q < n_queries; ++q)
    for (std::size_t k = 0; k < key_valid.size(); ++k) m.valid_[q * m.n_k_ + k] = key_valid[k] ? 1 : 0;
  return m;
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m;
  m.kind_ = MaskKind::Causal;
  m.n_q_ = n;
  m.n_k_ = n;
  m.valid_.resize(n * n);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k <= q; ++k) m.valid_[q * n + k] = 1;
  return m;
}

AttentionMask AttentionMask::causal_padding(const std::vector<std::uint8_t>& key_valid) {
  AttentionMask m = causal(key_valid.size());
  m.kind_ = MaskKind::Both;
  for (std::size_t q = 0; q < m.n_q_; ++q)
    for (std::size_t k = 0; k < m.n_k_; ++k)
      if (!key_valid[k]) m.valid_[q * m.n_k_ + k] = 0;
  return m;
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  std::uint64_t z = base ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

template <typename T>
ParamId add_param(ParamStore<T>& store, const std::string& name, ParamSpec spec, std::uint64_t base_seed) {
  spec.seed = derive_seed(base_seed, name);
  return store.add(name, init_tensor<T>(spec));
}

template <typename T>
AttentionParams make_attention_params(ParamStore<T>& store, const std::string& prefix, std::size_t d_model,
                                      std::size_t heads, std::size_t n_memory, bool aoa, std::uint64_t seed) {
  if (heads == 0 || d_model % heads != 0)
    throw ConfigError("attention: d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  AttentionParams p;
  p.proj.d_model = d_model;
  p.proj.heads = heads;
  auto glorot = [&](std::size_t rows, std::size_t cols) {
    return ParamSpec{InitKind::GlorotUniform, rows, cols, rows, cols};
  };
  auto zero = [&](std::size_t cols) { return ParamSpec{InitKind::Zero, 1, cols}; };
  p.proj.w_q = add_param(store, prefix + ".w_q", glorot(d_model, d_model), seed);
  p.proj.b_q = add_param(store, prefix + ".b_q", zero(d_model), seed);
  p.proj.w_k = add_param(store, prefix + ".w_k", glorot(d_model, d_model), seed);
  p.proj.b_k = add_param(store, prefix + ".b_k", zero(d_model), seed);
  p.proj.w_v = add_param(store, prefix + ".w_v", glorot(d_model, d_model), seed);
  p.proj.b_v = add_param(store, prefix + ".b_v", zero(d_model), seed);
  if (aoa) {
    AoAParams a;
    a.w_info = add_param(store, prefix + ".aoa.w_info", glorot(2 * d_model, d_model), seed);
    a.b_info = add_param(store, prefix + ".aoa.b_info", zero(d_model), seed);
    a.w_gate = add_param(store, prefix + ".aoa.w_gate", glorot(2 * d_model, d_model), seed);
    a.b_gate = add_param(store, prefix + ".aoa.b_gate", zero(d_model), seed);
    p.aoa = a;
  } else {
    p.proj.w_o = add_param(store, prefix + ".w_o", glorot(d_model, d_model), seed);
    p.proj.b_o = add_param(store, prefix + ".b_o", zero(d_model), seed);
  }
  if (n_memory > 0) {
    MemorySlots m;
    m.n_memory = n_memory;
    const std::size_t d_head = d_model / heads;
    m.keys = add_param(store, prefix + ".mem_k",
                       ParamSpec{InitKind::MemoryKey, n_memory, d_model, 0, 0, n_memory, d_head}, seed);
    m.values = add_param(store, prefix + ".mem_v",
                         ParamSpec{InitKind::MemoryValue, n_memory, d_model, 0, 0, n_memory, d_head}, seed);
    p.memory = m;
  }
  return p;
}

template <typename T>
Var<T> sdpa(Var<T> q, Var<T> k, Var<T> v, const AttentionMask& mask, std::size_t heads, Tensor<T>* weights) {
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  const std::size_t nq = qv.rows(), nk = kv.rows(), width = qv.cols();
  if (heads == 0 || width % heads != 0) throw ConfigError("sdpa: width must be divisible by heads");
  if (kv.cols() != width || vv.cols() != width || vv.rows() != nk)
    throw ShapeError("sdpa: Q" + shape_str(qv.shape()) + " K" + shape_str(kv.shape()) + " V" + shape_str(vv.shape()));
  if (nk == 0) throw ContractError("sdpa: no keys");
  if (!mask.empty() && (mask.queries() != nq || mask.keys() > nk))
    throw ShapeError("sdpa: mask does not match query/key counts");
  const std::size_t dh = width / heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));

  Tensor<T> probs({heads, nq, nk});
  Tensor<T> out = Tensor<T>::matrix(nq, width);
  for (std::size_t qi = 0; qi < nq; ++qi) {
    bool any = false;
    for (std::size_t ki = 0; ki < nk && !any; ++ki) any = mask.allows(qi, ki);
    if (!any) throw ContractError("sdpa: every key is masked for query " + std::to_string(qi));
  }
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t qi = 0; qi < nq; ++qi) {
      T* p = &probs[(h * nq + qi) * nk];
      const T* qrow = &qv[qi * width + off];
      for (std::size_t ki = 0; ki < nk; ++ki) {
        const T* krow = &kv[ki * width + off];
        T acc = 0;
        for (std::size_t j = 0; j < dh; ++j) acc += qrow[j] * krow[j];
        p[ki] = acc * inv_scale + (mask.allows(qi, ki) ? T(0) : T(kMaskedLogit));
      }
      kernels::softmax_inplace(std::span<T>(p, nk));
      T* orow = &out[qi * width + off];
      for (std::size_t ki = 0; ki < nk; ++ki) {
        const T w = p[ki];
        if (w == T(0)) continue;
        const T* vrow = &vv[ki * width + off];
        for (std::size_t j = 0; j < dh; ++j) orow[j] += w * vrow[j];
      }
    }
  }
  if (weights) *weights = probs;
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->push(
      std::move(out), "sdpa", {iq, ik, iv},
      [iq, ik, iv, probs = std::move(probs), heads, nq, nk, width, dh, inv_scale](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& qv = t.value(iq);
        const Tensor<T>& kv = t.value(ik);
        const Tensor<T>& vv = t.value(iv);
        const bool need_q = t.requires_grad(iq), need_k = t.requires_grad(ik), need_v = t.requires_grad(iv);
        T* gq = need_q ? t.grad(iq).data().data() : nullptr;
        T* gk = need_k ? t.grad(ik).data().data() : nullptr;
        T* gv = need_v ? t.grad(iv).data().data() : nullptr;
        std::vector<T> dp(nk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t qi = 0; qi < nq; ++qi) {
            const T* p = &probs[(h * nq + qi) * nk];
            const T* grow = &g[qi * width + off];
            // dP = dO V^T ; dV += P^T dO
            T dot = 0;
            for (std::size_t ki = 0; ki < nk; ++ki) {
              const T* vrow = &vv[ki * width + off];
              T acc = 0;
              for (std::size_t j = 0; j < dh; ++j) acc += grow[j] * vrow[j];
              dp[ki] = acc;
              dot += acc * p[ki];
              if (gv && p[ki] != T(0)) {
                T* gvrow = gv + ki * width + off;
                for (std::size_t j = 0; j < dh; ++j) gvrow[j] += p[ki] * grow[j];
              }
            }
            // dS = P * (dP - <dP, P>), scaled into dQ and dK
            for (std::size_t ki = 0; ki < nk; ++ki) {
              const T ds = p[ki] * (dp[ki] - dot) * inv_scale;
              if (ds == T(0)) continue;
              if (gq) {
                const T* krow = &kv[ki * width + off];
                T* gqrow = gq + qi * width + off;
                for (std::size_t j = 0; j < dh; ++j) gqrow[j] += ds * krow[j];
              }
              if (gk) {
                const T* qrow = &qv[qi * width + off];
                T* gkrow = gk + ki * width + off;
                for (std::size_t j = 0; j < dh; ++j) gkrow[j] += ds * qrow[j];
              }
            }
          }
        }
      });
}

template <typename T>
KeyValue<T> project_kv(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_kv) {
  Tape<T>& tape = *x_kv.tape;
  KeyValue<T> kv;
  kv.keys = affine(x_kv, tape.param(store, p.proj.w_k), tape.param(store, p.proj.b_k));
  kv.values = affine(x_kv, tape.param(store, p.proj.w_v), tape.param(store, p.proj.b_v));
  if (p.memory && p.memory->n_memory > 0) {
    const Tensor<T>& mk = store.value(p.memory->keys);
    const Tensor<T>& mv = store.value(p.memory->values);
    if (mk.rows() != p.memory->n_memory || mk.cols() != p.proj.d_model || mv.shape() != mk.shape())
      throw ConfigError("memory slots: expected [" + std::to_string(p.memory->n_memory) + "," +
                        std::to_string(p.proj.d_model) + "], got keys " + shape_str(mk.shape()) + " values " +
                        shape_str(mv.shape()));
    kv.keys = concat_rows<T>({kv.keys, tape.param(store, p.memory->keys)});
    kv.values = concat_rows<T>({kv.values, tape.param(store, p.memory->values)});
    kv.n_memory = p.memory->n_memory;
  }
  return kv;
}

template <typename T>
Var<T> aoa_output(const ParamStore<T>& store, const AoAParams& p, Var<T> query, Var<T> attended) {
  Tape<T>& tape = *query.tape;
  Var<T> joined = concat_cols<T>({query, attended});
  Var<T> info = affine(joined, tape.param(store, p.w_info), tape.param(store, p.b_info));
  Var<T> gate = sigmoid(affine(joined, tape.param(store, p.w_gate), tape.param(store, p.b_gate)));
  return mul(gate, info);
}

template <typename T>
Var<T> attend(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_q, const KeyValue<T>& kv,
              const AttentionMask& mask) {
  Tape<T>& tape = *x_q.tape;
  if (x_q.cols() != p.proj.d_model) throw ShapeError("attention: query width does not match d_model");
  Var<T> q = affine(x_q, tape.param(store, p.proj.w_q), tape.param(store, p.proj.b_q));
  Var<T> heads = sdpa(q, kv.keys, kv.values, mask, p.proj.heads);
  if (p.aoa) return aoa_output(store, *p.aoa, x_q, heads);
  return affine(heads, tape.param(store, p.proj.w_o), tape.param(store, p.proj.b_o));
}

template <typename T>
Var<T> multi_head(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_q, Var<T> x_kv,
                  const AttentionMask& mask) {
  return attend(store, p, x_q, project_kv(store, p, x_kv), mask);
}

template <typename T>
Var<T> memory_augmented_attention(const ParamStore<T>& store, const AttentionParams& p, Var<T> x,
                                  const AttentionMask& mask) {
  return multi_head(store, p, x, x, mask);
}

template <typename T>
Var<T> aoa_attention(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_q, Var<T> x_kv,
                     const AttentionMask& mask) {
  if (!p.aoa) throw ConfigError("aoa_attention: site has no attention-on-attention parameters");
  return multi_head(store, p, x_q, x_kv, mask);
}

#define M2_INSTANTIATE_ATTENTION(T)                                                                             \
  template ParamId add_param(ParamStore<T>&, const std::string&, ParamSpec, std::uint64_t);                     \
  template AttentionParams make_attention_params(ParamStore<T>&, const std::string&, std::size_t, std::size_t,  \
                                                 std::size_t, bool, std::uint64_t);                             \
  template Var<T> sdpa(Var<T>, Var<T>, Var<T>, const AttentionMask&, std::size_t, Tensor<T>*);                  \
  template KeyValue<T> project_kv(const ParamStore<T>&, const AttentionParams&, Var<T>);                        \
  template Var<T> attend(const ParamStore<T>&, const AttentionParams&, Var<T>, const KeyValue<T>&,              \
                         const AttentionMask&);                                                                 \
  template Var<T> multi_head(const ParamStore<T>&, const AttentionParams&, Var<T>, Var<T>, const AttentionMask&); \
  template Var<T> memory_augmented_attention(const ParamStore<T>&, const AttentionParams&, Var<T>,              \
                                             const AttentionMask&);                                             \
  template Var<T> aoa_output(const ParamStore<T>&, const AoAParams&, Var<T>, Var<T>);                          \
  template Var<T> aoa_attention(const ParamStore<T>&, const AttentionParams&, Var<T>, Var<T>, const AttentionMask&);

M2_INSTANTIATE_ATTENTION(float)
M2_INSTANTIATE_ATTENTION(double)

}  // namespace m2
