#include "deqff/eqnet.hpp"

#include <algorithm>
#include <cmath>

namespace deqff::eqnet {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
  double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

void ModelConfig::validate() const {
  check(l_max >= 1 && l_max <= irreps::kMaxDegree, "ModelConfig: l_max must be in [1, cached]");
  check(channels >= 1, "ModelConfig: channels must be positive");
  check(heads >= 1 && channels % heads == 0, "ModelConfig: channels must divide into heads");
  check(d_att >= 1 && d_rad >= 1 && d_head >= 1 && num_basis >= 1,
        "ModelConfig: widths must be positive");
  check(r_cut > 0.0, "ModelConfig: r_cut must be positive");
  check(max_neighbors >= 1, "ModelConfig: max_neighbors must be positive");
  check(n_layers >= 1, "ModelConfig: n_layers must be >= 1");
  check(path_drop >= 0.0 && path_drop < 1.0, "ModelConfig: path_drop must be in [0,1)");
  check(z_max >= 1, "ModelConfig: z_max must be >= 1");
}

PathTable PathTable::build(const ModelConfig& cfg) {
  const auto& cg = irreps::CGTable::get(cfg.l_max);
  PathTable t;
  int off = 0;
  for (int l1 = 0; l1 <= cfg.l_max; ++l1)
    for (int l2 = 0; l2 <= cfg.l_max; ++l2)
      for (int l3 = 0; l3 <= cfg.l_max; ++l3) {
        const auto& p = cg.path(l1, l2, l3);
        if (!p.valid) continue;
        t.paths.push_back({l1, l2, l3, &p, off});
        off += cfg.channels * (2 * l3 + 1);
      }
  t.ip_stride = off;
  return t;
}

const PathTable& get_path_table(const ModelConfig& cfg) {
  thread_local ModelConfig last_cfg;
  thread_local PathTable table;
  thread_local bool have = false;
  if (!have || last_cfg.l_max != cfg.l_max || last_cfg.channels != cfg.channels) {
    table = PathTable::build(cfg);
    last_cfg = cfg;
    have = true;
  }
  return table;
}

namespace {

constexpr double kNormEps = 1e-8;  // rmsnorm variance floor

}  // namespace

// ---------------------------------------------------------------------------
// Parameters

ModelParams ModelParams::make(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams P;
  P.cfg = cfg;
  const int C = cfg.channels, Lm = cfg.l_max;
  const int n_paths = get_path_table(cfg).size();

  auto add = [&](const std::string& name, int n, int fan_in,
                 ParamArray::Init init = ParamArray::Init::uniform) {
    P.arrays.push_back({name, std::vector<double>(n, 0.0), fan_in, init});
    return int(P.arrays.size()) - 1;
  };
  auto add_layer = [&](const std::string& prefix) {
    LayerIndex li;
    li.gamma = add(prefix + ".gamma", (Lm + 1) * C, 1, ParamArray::Init::one);
    li.w_mix = add(prefix + ".w_mix", (Lm + 1) * C * 2 * C, 2 * C);
    li.rad_w1 = add(prefix + ".rad_w1", cfg.d_rad * cfg.num_basis, cfg.num_basis);
    li.rad_b1 = add(prefix + ".rad_b1", cfg.d_rad, 1, ParamArray::Init::zero);
    li.rad_w2 = add(prefix + ".rad_w2", n_paths * C * cfg.d_rad, cfg.d_rad);
    li.rad_b2 = add(prefix + ".rad_b2", n_paths * C, 1, ParamArray::Init::zero);
    li.att_w = add(prefix + ".att_w", cfg.d_att * 2 * C, 2 * C);
    li.att_b = add(prefix + ".att_b", cfg.d_att, 1, ParamArray::Init::zero);
    li.att_k = add(prefix + ".att_k", cfg.d_att * cfg.heads, cfg.d_att);
    li.w_out = add(prefix + ".w_out", (Lm + 1) * C * C, C);
    return li;
  };

  P.idx.atom_emb = add("embed.atom_emb", (cfg.z_max + 1) * C, 1);
  P.idx.emb_rw1 = add("embed.rad_w1", cfg.d_rad * cfg.num_basis, cfg.num_basis);
  P.idx.emb_rb1 = add("embed.rad_b1", cfg.d_rad, 1, ParamArray::Init::zero);
  P.idx.emb_rw2 = add("embed.rad_w2", (Lm + 1) * C * cfg.d_rad, cfg.d_rad);
  P.idx.emb_rb2 = add("embed.rad_b2", (Lm + 1) * C, 1, ParamArray::Init::zero);
  P.idx.alpha = add("embed.alpha", 1, 1, ParamArray::Init::zero);
  for (int l = 0; l < cfg.n_layers; ++l) P.idx.layers.push_back(add_layer("layer" + std::to_string(l)));
  P.idx.fhead = add_layer("fhead");
  P.idx.f_readout = add("fhead.readout", C, C);
  P.idx.e_w1 = add("ehead.w1", cfg.d_head * C, C);
  P.idx.e_b1 = add("ehead.b1", cfg.d_head, 1, ParamArray::Init::zero);
  P.idx.e_w2 = add("ehead.w2", cfg.d_head, cfg.d_head);
  P.idx.e_b2 = add("ehead.b2", 1, 1, ParamArray::Init::zero);
  return P;
}

void ModelParams::init(Rng& rng, double avg_degree) {
  for (auto& arr : arrays) {
    switch (arr.init) {
      case ParamArray::Init::uniform: {
        double a = std::sqrt(1.0 / double(arr.fan_in));
        for (double& v : arr.v) v = rng.uniform(-a, a);
        break;
      }
      case ParamArray::Init::zero:
        std::fill(arr.v.begin(), arr.v.end(), 0.0);
        break;
      case ParamArray::Init::one:
        std::fill(arr.v.begin(), arr.v.end(), 1.0);
        break;
    }
  }
  a(idx.alpha)[0] = 1.0 / std::sqrt(std::max(avg_degree, 1.0));
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  for (auto& arr : z.arrays) std::fill(arr.v.begin(), arr.v.end(), 0.0);
  return z;
}

double ModelParams::sq_norm() const {
  double s = 0.0;
  for (const auto& arr : arrays)
    for (double v : arr.v) s += v * v;
  return s;
}

void ModelParams::add_scaled(const ModelParams& other, double s) {
  check(shape_equal(other), "ModelParams::add_scaled: shape mismatch");
  for (std::size_t i = 0; i < arrays.size(); ++i)
    for (std::size_t j = 0; j < arrays[i].v.size(); ++j) arrays[i].v[j] += s * other.arrays[i].v[j];
}

void ModelParams::scale(double s) {
  for (auto& arr : arrays)
    for (double& v : arr.v) v *= s;
}

bool ModelParams::shape_equal(const ModelParams& other) const {
  if (arrays.size() != other.arrays.size()) return false;
  for (std::size_t i = 0; i < arrays.size(); ++i)
    if (arrays[i].name != other.arrays[i].name || arrays[i].v.size() != other.arrays[i].v.size())
      return false;
  return true;
}

// ---------------------------------------------------------------------------
// Dropout mask

DropoutMask DropoutMask::all_keep(int n_edges) {
  DropoutMask m;
  m.keep.assign(n_edges, 1);
  return m;
}

DropoutMask DropoutMask::sample(int n_edges, double rate, std::uint64_t seed) {
  DropoutMask m;
  m.seed = seed;
  m.keep.resize(n_edges);
  Rng rng(seed);
  for (int e = 0; e < n_edges; ++e) m.keep[e] = rng.uniform() >= rate ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Edge cache

EdgeCache build_edge_cache(const graph::AtomicSystem& system, const graph::EdgeList& edges,
                           const ModelConfig& cfg) {
  EdgeCache ec;
  ec.n_atoms = system.size();
  ec.n_edges = edges.size();
  const int shd = cfg.sh_dim();
  ec.Y.resize(std::size_t(ec.n_edges) * shd);
  ec.rb.resize(std::size_t(ec.n_edges) * cfg.num_basis);
  ec.env.resize(ec.n_edges);
  ec.ln_env.resize(ec.n_edges);
  ec.src.resize(ec.n_edges);
  ec.dst.resize(ec.n_edges);
  graph::RadialBasis basis{cfg.num_basis, cfg.r_cut, 0.0};
  for (int e = 0; e < ec.n_edges; ++e) {
    ec.src[e] = edges.edges[e].src;
    ec.dst[e] = edges.edges[e].dst;
    double d = edges.dist[e];
    Vec3 u = edges.r_vec[e] * (1.0 / d);
    auto y = irreps::spherical_harmonics_flat(cfg.l_max, u);
    std::copy(y.begin(), y.end(), ec.Y.begin() + std::size_t(e) * shd);
    graph::radial_embed(d, basis, ec.rb.data() + std::size_t(e) * cfg.num_basis);
    ec.env[e] = graph::cutoff_envelope(d, cfg.r_cut);
    ec.ln_env[e] = ec.env[e] > 0.0 ? std::log(ec.env[e]) : -1e30;
  }
  // edges arrive sorted by dst from the builder
  ec.dst_begin.assign(ec.n_atoms + 1, 0);
  for (int e = 0; e < ec.n_edges; ++e) ec.dst_begin[ec.dst[e] + 1]++;
  for (int n = 0; n < ec.n_atoms; ++n) ec.dst_begin[n + 1] += ec.dst_begin[n];
  for (int e = 1; e < ec.n_edges; ++e)
    check(ec.dst[e - 1] <= ec.dst[e], "build_edge_cache: edges must be sorted by dst");
  return ec;
}

// ---------------------------------------------------------------------------
// Radial MLP (shared by layers and the embedding)

namespace {

// out[i] = env * (W2 silu(W1 rb + b1) + b2)[i]; pre stores W1 rb + b1
void radial_mlp_forward(const double* rb, double env, const double* w1, const double* b1,
                        const double* w2, const double* b2, int nb, int dr, int nout,
                        double* pre, double* out) {
  for (int i = 0; i < dr; ++i) {
    double s = b1[i];
    const double* row = w1 + std::size_t(i) * nb;
    for (int j = 0; j < nb; ++j) s += row[j] * rb[j];
    pre[i] = s;
  }
  for (int o = 0; o < nout; ++o) {
    double s = b2[o];
    const double* row = w2 + std::size_t(o) * dr;
    for (int i = 0; i < dr; ++i) s += row[i] * silu(pre[i]);
    out[o] = env * s;
  }
}

// accumulates parameter gradients for one edge given dout (d of the enveloped
// output)
void radial_mlp_backward(const double* rb, double env, const double* w2, const double* pre,
                         int nb, int dr, int nout, const double* dout, double* dw1, double* db1,
                         double* dw2, double* db2) {
  // dsilu = W2^T (env * dout)
  for (int i = 0; i < dr; ++i) {
    double dsilu = 0.0;
    for (int o = 0; o < nout; ++o) dsilu += w2[std::size_t(o) * dr + i] * env * dout[o];
    double dpre = dsilu * silu_grad(pre[i]);
    db1[i] += dpre;
    double* row = dw1 + std::size_t(i) * nb;
    for (int j = 0; j < nb; ++j) row[j] += dpre * rb[j];
  }
  for (int o = 0; o < nout; ++o) {
    double d = env * dout[o];
    db2[o] += d;
    double* row = dw2 + std::size_t(o) * dr;
    for (int i = 0; i < dr; ++i) row[i] += d * silu(pre[i]);
  }
}

}  // namespace

void compute_layer_radial(const ModelParams& P, const LayerIndex& li, const EdgeCache& ec,
                          LayerRadialCache& out) {
  const auto& cfg = P.cfg;
  const int nout = get_path_table(cfg).size() * cfg.channels;
  out.w.resize(std::size_t(ec.n_edges) * nout);
  out.pre.resize(std::size_t(ec.n_edges) * cfg.d_rad);
  for (int e = 0; e < ec.n_edges; ++e) {
    radial_mlp_forward(ec.rb.data() + std::size_t(e) * cfg.num_basis, ec.env[e], P.p(li.rad_w1),
                       P.p(li.rad_b1), P.p(li.rad_w2), P.p(li.rad_b2), cfg.num_basis, cfg.d_rad,
                       nout, out.pre.data() + std::size_t(e) * cfg.d_rad,
                       out.w.data() + std::size_t(e) * nout);
  }
}

// ---------------------------------------------------------------------------
// Attention layer forward

void layer_forward(const double* h_in, double* h_out, const ModelParams& P,
                   const LayerIndex& li, const EdgeCache& ec, const LayerRadialCache& rc,
                   const DropoutMask& mask, LayerCtx& ctx) {
  const auto& cfg = P.cfg;
  const auto& pt = get_path_table(cfg);
  const int N = ec.n_atoms, E = ec.n_edges, C = cfg.channels, Lm = cfg.l_max;
  const int D = cfg.feat_dim(), H = cfg.heads, DA = cfg.d_att;
  const int cph = C / H;  // channels per head
  check(int(mask.keep.size()) == E, "layer_forward: mask size mismatch");

  ctx.h_in.assign(h_in, h_in + std::size_t(N) * D);
  ctx.hn.assign(std::size_t(N) * D, 0.0);
  ctx.rho.assign(std::size_t(N) * (Lm + 1), 0.0);
  ctx.u.assign(std::size_t(E) * D, 0.0);
  ctx.ip.assign(std::size_t(E) * pt.ip_stride, 0.0);
  ctx.att_pre.assign(std::size_t(E) * DA, 0.0);
  ctx.att_act.assign(std::size_t(E) * DA, 0.0);
  ctx.logits.assign(std::size_t(E) * H, 0.0);
  ctx.att.assign(std::size_t(E) * H, 0.0);
  ctx.v.assign(std::size_t(E) * D, 0.0);
  ctx.msum.assign(std::size_t(N) * D, 0.0);

  const double* gamma = P.p(li.gamma);

  // per-degree RMS normalization with learned gains
  for (int n = 0; n < N; ++n) {
    const double* hi = ctx.h_in.data() + std::size_t(n) * D;
    double* hn = ctx.hn.data() + std::size_t(n) * D;
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0), nb = C * d;
      double ms = 0.0;
      for (int i = 0; i < nb; ++i) ms += hi[off + i] * hi[off + i];
      double rho = std::sqrt(ms / nb + kNormEps);
      ctx.rho[std::size_t(n) * (Lm + 1) + l] = rho;
      for (int c = 0; c < C; ++c) {
        double g = gamma[l * C + c] / rho;
        for (int m = 0; m < d; ++m) hn[off + c * d + m] = g * hi[off + c * d + m];
      }
    }
  }

  const double* w_mix = P.p(li.w_mix);
  const double* att_w = P.p(li.att_w);
  const double* att_b = P.p(li.att_b);
  const double* att_k = P.p(li.att_k);
  const int n_paths = pt.size();

  for (int e = 0; e < E; ++e) {
    if (!mask.keep[e]) continue;
    const double* ht = ctx.hn.data() + std::size_t(ec.dst[e]) * D;
    const double* hs = ctx.hn.data() + std::size_t(ec.src[e]) * D;
    double* u = ctx.u.data() + std::size_t(e) * D;

    // channel mixer on concatenated (target, source), degree by degree
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0);
      const double* wl = w_mix + std::size_t(l) * C * 2 * C;
      for (int oc = 0; oc < C; ++oc) {
        const double* row = wl + std::size_t(oc) * 2 * C;
        for (int m = 0; m < d; ++m) {
          double s = 0.0;
          for (int ic = 0; ic < C; ++ic)
            s += row[ic] * ht[off + ic * d + m] + row[C + ic] * hs[off + ic * d + m];
          u[off + oc * d + m] = s;
        }
      }
    }

    // MLP attention logits from degree-0 features, gated by the log envelope
    double* pre = ctx.att_pre.data() + std::size_t(e) * DA;
    double* act = ctx.att_act.data() + std::size_t(e) * DA;
    for (int i = 0; i < DA; ++i) {
      double s = att_b[i];
      const double* row = att_w + std::size_t(i) * 2 * C;
      for (int c = 0; c < C; ++c) s += row[c] * ht[c] + row[C + c] * hs[c];
      pre[i] = s;
      act[i] = s > 0.0 ? s : cfg.leaky_slope * s;
    }
    double* lg = ctx.logits.data() + std::size_t(e) * H;
    for (int h = 0; h < H; ++h) {
      double s = ec.ln_env[e];
      for (int i = 0; i < DA; ++i) s += att_k[std::size_t(i) * H + h] * act[i];
      lg[h] = s;
    }

    // weighted tensor-product messages
    const double* Y = ec.Y.data() + std::size_t(e) * cfg.sh_dim();
    const double* w = rc.w.data() + std::size_t(e) * n_paths * C;
    double* ip = ctx.ip.data() + std::size_t(e) * pt.ip_stride;
    double* v = ctx.v.data() + std::size_t(e) * D;
    for (int p = 0; p < n_paths; ++p) {
      const auto& path = pt.paths[p];
      const int d1 = 2 * path.l1 + 1, d3 = 2 * path.l3 + 1;
      const double* yb = Y + path.l2 * path.l2;
      for (int c = 0; c < C; ++c) {
        const double* fb = u + cfg.block_offset(path.l1, c);
        double* ipc = ip + path.ip_offset + c * d3;
        irreps::cg_contract(*path.cg, fb, yb, ipc);
        double wc = w[p * C + c];
        double* vb = v + cfg.block_offset(path.l3, c);
        for (int m = 0; m < d3; ++m) vb[m] += wc * ipc[m];
      }
      (void)d1;
    }
  }

  // softmax over kept incoming edges, per head
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < H; ++h) {
      double mx = -1e300;
      for (int e = ec.dst_begin[n]; e < ec.dst_begin[n + 1]; ++e)
        if (mask.keep[e]) mx = std::max(mx, ctx.logits[std::size_t(e) * H + h]);
      if (mx <= -1e299) continue;  // no surviving edges
      double z = 0.0;
      for (int e = ec.dst_begin[n]; e < ec.dst_begin[n + 1]; ++e)
        if (mask.keep[e]) z += std::exp(ctx.logits[std::size_t(e) * H + h] - mx);
      for (int e = ec.dst_begin[n]; e < ec.dst_begin[n + 1]; ++e)
        if (mask.keep[e])
          ctx.att[std::size_t(e) * H + h] = std::exp(ctx.logits[std::size_t(e) * H + h] - mx) / z;
    }
  }

  // attention-weighted aggregation
  for (int e = 0; e < E; ++e) {
    if (!mask.keep[e]) continue;
    double* ms = ctx.msum.data() + std::size_t(ec.dst[e]) * D;
    const double* v = ctx.v.data() + std::size_t(e) * D;
    const double* a = ctx.att.data() + std::size_t(e) * H;
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0);
      for (int c = 0; c < C; ++c) {
        double ac = a[c / cph];
        for (int m = 0; m < d; ++m) ms[off + c * d + m] += ac * v[off + c * d + m];
      }
    }
  }

  // per-degree output mixer and residual
  const double* w_out = P.p(li.w_out);
  for (int n = 0; n < N; ++n) {
    const double* hi = ctx.h_in.data() + std::size_t(n) * D;
    const double* ms = ctx.msum.data() + std::size_t(n) * D;
    double* ho = h_out + std::size_t(n) * D;
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0);
      const double* wl = w_out + std::size_t(l) * C * C;
      for (int oc = 0; oc < C; ++oc) {
        const double* row = wl + std::size_t(oc) * C;
        for (int m = 0; m < d; ++m) {
          double s = 0.0;
          for (int ic = 0; ic < C; ++ic) s += row[ic] * ms[off + ic * d + m];
          ho[off + oc * d + m] = hi[off + oc * d + m] + s;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Embedding

void embed_forward(const graph::AtomicSystem& system, const EdgeCache& ec,
                   const ModelParams& P, double* x_out, EmbedCtx* ctx) {
  const auto& cfg = P.cfg;
  const int N = ec.n_atoms, E = ec.n_edges, C = cfg.channels, Lm = cfg.l_max;
  const int D = cfg.feat_dim();
  const double alpha = P.a(P.idx.alpha)[0];
  const auto& cg = irreps::CGTable::get(Lm);

  std::vector<double> local_sum;
  std::vector<double>& sum_v = ctx ? ctx->sum_v : local_sum;
  sum_v.assign(std::size_t(N) * D, 0.0);
  if (ctx) ctx->pre.assign(std::size_t(E) * cfg.d_rad, 0.0);

  std::vector<double> pre_scratch(cfg.d_rad), w(std::size_t(Lm + 1) * C);
  const double one = 1.0;
  for (int e = 0; e < E; ++e) {
    double* pre = ctx ? ctx->pre.data() + std::size_t(e) * cfg.d_rad : pre_scratch.data();
    radial_mlp_forward(ec.rb.data() + std::size_t(e) * cfg.num_basis, ec.env[e],
                       P.p(P.idx.emb_rw1), P.p(P.idx.emb_rb1), P.p(P.idx.emb_rw2),
                       P.p(P.idx.emb_rb2), cfg.num_basis, cfg.d_rad, (Lm + 1) * C, pre, w.data());
    const double* Y = ec.Y.data() + std::size_t(e) * cfg.sh_dim();
    double* sv = sum_v.data() + std::size_t(ec.dst[e]) * D;
    for (int l = 0; l <= Lm; ++l) {
      const auto& path = cg.path(0, l, l);
      const double* yb = Y + l * l;
      for (int c = 0; c < C; ++c)
        irreps::cg_contract(path, &one, yb, sv + cfg.block_offset(l, c), w[l * C + c]);
    }
  }

  const double* emb = P.p(P.idx.atom_emb);
  for (int n = 0; n < N; ++n) {
    double* x = x_out + std::size_t(n) * D;
    std::fill(x, x + D, 0.0);
    int z = system.atomic_numbers[n];
    check(z <= cfg.z_max, "embed_forward: atomic number exceeds embedding table");
    for (int c = 0; c < C; ++c) x[cfg.block_offset(0, c)] = emb[std::size_t(z) * C + c];
    const double* sv = sum_v.data() + std::size_t(n) * D;
    for (int i = 0; i < D; ++i) x[i] += alpha * sv[i];
  }
}

void embed_backward(const double* dx, const graph::AtomicSystem& system, const EdgeCache& ec,
                    const ModelParams& P, const EmbedCtx& ctx, ModelParams& grads) {
  const auto& cfg = P.cfg;
  const int N = ec.n_atoms, E = ec.n_edges, C = cfg.channels, Lm = cfg.l_max;
  const int D = cfg.feat_dim();
  const double alpha = P.a(P.idx.alpha)[0];
  const auto& cg = irreps::CGTable::get(Lm);

  double dalpha = 0.0;
  for (int n = 0; n < N; ++n) {
    const double* dxn = dx + std::size_t(n) * D;
    const double* sv = ctx.sum_v.data() + std::size_t(n) * D;
    for (int i = 0; i < D; ++i) dalpha += dxn[i] * sv[i];
    int z = system.atomic_numbers[n];
    double* demb = grads.p(grads.idx.atom_emb) + std::size_t(z) * C;
    for (int c = 0; c < C; ++c) demb[c] += dxn[cfg.block_offset(0, c)];
  }
  grads.a(grads.idx.alpha)[0] += dalpha;

  const double one = 1.0;
  std::vector<double> dw(std::size_t(Lm + 1) * C);
  for (int e = 0; e < E; ++e) {
    const double* Y = ec.Y.data() + std::size_t(e) * cfg.sh_dim();
    const double* dsv = dx + std::size_t(ec.dst[e]) * D;  // d sum_v = alpha * dx
    for (int l = 0; l <= Lm; ++l) {
      const auto& path = cg.path(0, l, l);
      const double* yb = Y + l * l;
      const int d = 2 * l + 1;
      for (int c = 0; c < C; ++c) {
        // d w[l,c] = <alpha * dx block, CG(1, Y_l)>
        double s = 0.0;
        double tmp[2 * irreps::kMaxDegree + 1] = {};
        irreps::cg_contract(path, &one, yb, tmp);
        const double* db = dsv + cfg.block_offset(l, c);
        for (int m = 0; m < d; ++m) s += db[m] * tmp[m];
        dw[l * C + c] = alpha * s;
      }
    }
    radial_mlp_backward(ec.rb.data() + std::size_t(e) * cfg.num_basis, ec.env[e],
                        P.p(P.idx.emb_rw2), ctx.pre.data() + std::size_t(e) * cfg.d_rad,
                        cfg.num_basis, cfg.d_rad, (Lm + 1) * C, dw.data(),
                        grads.p(grads.idx.emb_rw1), grads.p(grads.idx.emb_rb1),
                        grads.p(grads.idx.emb_rw2), grads.p(grads.idx.emb_rb2));
  }
}

// ---------------------------------------------------------------------------
// Output heads

EnergyForces heads_forward(const double* h, const ModelParams& P, const EdgeCache& ec,
                           const DropoutMask& mask, HeadsCtx& ctx) {
  const auto& cfg = P.cfg;
  const int N = ec.n_atoms, C = cfg.channels, D = cfg.feat_dim(), DH = cfg.d_head;
  EnergyForces out;

  // energy: per-node MLP on degree-0 features, summed
  ctx.e_pre.assign(std::size_t(N) * DH, 0.0);
  const double* e_w1 = P.p(P.idx.e_w1);
  const double* e_b1 = P.p(P.idx.e_b1);
  const double* e_w2 = P.p(P.idx.e_w2);
  const double e_b2 = P.a(P.idx.e_b2)[0];
  double energy = 0.0;
  for (int n = 0; n < N; ++n) {
    const double* h0 = h + std::size_t(n) * D;  // degree-0 channels are contiguous
    double* pre = ctx.e_pre.data() + std::size_t(n) * DH;
    double node_e = e_b2;
    for (int i = 0; i < DH; ++i) {
      double s = e_b1[i];
      const double* row = e_w1 + std::size_t(i) * C;
      for (int c = 0; c < C; ++c) s += row[c] * h0[c];
      pre[i] = s;
      node_e += e_w2[i] * silu(s);
    }
    energy += node_e;
  }
  out.energy = energy;

  // forces: one more attention layer, then the degree-1 single-channel readout
  compute_layer_radial(P, P.idx.fhead, ec, ctx.f_radial);
  ctx.h_f.assign(std::size_t(N) * D, 0.0);
  layer_forward(h, ctx.h_f.data(), P, P.idx.fhead, ec, ctx.f_radial, mask, ctx.f_layer);
  const double* f_read = P.p(P.idx.f_readout);
  out.forces.assign(N, Vec3{});
  for (int n = 0; n < N; ++n) {
    const double* hf = ctx.h_f.data() + std::size_t(n) * D;
    double v[3] = {0, 0, 0};  // m = -1, 0, +1  <->  (y, z, x)
    for (int c = 0; c < C; ++c) {
      const double* b = hf + cfg.block_offset(1, c);
      for (int m = 0; m < 3; ++m) v[m] += f_read[c] * b[m];
    }
    out.forces[n] = {v[2], v[0], v[1]};
  }
  return out;
}

void heads_backward(double dE, const std::vector<Vec3>& dF, const double* h, double* dh,
                    const ModelParams& P, const EdgeCache& ec, const DropoutMask& mask,
                    const HeadsCtx& ctx, ModelParams* grads) {
  const auto& cfg = P.cfg;
  const int N = ec.n_atoms, C = cfg.channels, D = cfg.feat_dim(), DH = cfg.d_head;

  // energy head
  if (dE != 0.0) {
    const double* e_w1 = P.p(P.idx.e_w1);
    const double* e_w2 = P.p(P.idx.e_w2);
    for (int n = 0; n < N; ++n) {
      const double* h0 = h + std::size_t(n) * D;
      const double* pre = ctx.e_pre.data() + std::size_t(n) * DH;
      double* dh0 = dh + std::size_t(n) * D;
      for (int i = 0; i < DH; ++i) {
        double dpre = dE * e_w2[i] * silu_grad(pre[i]);
        const double* row = e_w1 + std::size_t(i) * C;
        for (int c = 0; c < C; ++c) dh0[c] += row[c] * dpre;
        if (grads) {
          grads->a(grads->idx.e_w2)[i] += dE * silu(pre[i]);
          grads->a(grads->idx.e_b1)[i] += dpre;
          double* grow = grads->p(grads->idx.e_w1) + std::size_t(i) * C;
          for (int c = 0; c < C; ++c) grow[c] += dpre * h0[c];
        }
      }
      if (grads) grads->a(grads->idx.e_b2)[0] += dE;
    }
  }

  // force head
  const double* f_read = P.p(P.idx.f_readout);
  std::vector<double> dhf(std::size_t(N) * D, 0.0);
  for (int n = 0; n < N; ++n) {
    const Vec3& g = dF[n];
    double dv[3] = {g.y, g.z, g.x};  // back through (v[2], v[0], v[1]) -> (x,y,z)
    const double* hf = ctx.h_f.data() + std::size_t(n) * D;
    double* dn = dhf.data() + std::size_t(n) * D;
    for (int c = 0; c < C; ++c) {
      double* b = dn + cfg.block_offset(1, c);
      const double* hb = hf + cfg.block_offset(1, c);
      for (int m = 0; m < 3; ++m) {
        b[m] += f_read[c] * dv[m];
        if (grads) grads->a(grads->idx.f_readout)[c] += dv[m] * hb[m];
      }
    }
  }
  layer_backward(dhf.data(), dh, P, P.idx.fhead, ec, ctx.f_radial, mask, ctx.f_layer, grads);
}

// ---------------------------------------------------------------------------
// Explicit baseline stack

EnergyForces explicit_forward(const graph::AtomicSystem& system, const ModelParams& P, int L) {
  check(L >= 1, "explicit_forward: L must be >= 1");
  check(L == P.cfg.n_layers, "explicit_forward: L must match the per-layer parameter count");
  auto edges = graph::build_neighbor_list(system, P.cfg.r_cut, P.cfg.max_neighbors);
  auto ec = build_edge_cache(system, edges, P.cfg);
  auto mask = DropoutMask::all_keep(ec.n_edges);

  const int D = P.cfg.feat_dim();
  std::vector<double> h(std::size_t(ec.n_atoms) * D);
  embed_forward(system, ec, P, h.data(), nullptr);

  LayerCtx ctx;
  LayerRadialCache rc;
  for (int l = 0; l < L; ++l) {
    compute_layer_radial(P, P.idx.layers[l], ec, rc);
    layer_forward(h.data(), h.data(), P, P.idx.layers[l], ec, rc, mask, ctx);
  }
  HeadsCtx hctx;
  return heads_forward(h.data(), P, ec, mask, hctx);
}

}  // namespace deqff::eqnet
