#include <cmath>
#include <vector>

#include "deqff/eqnet.hpp"

namespace deqff::eqnet {

namespace {
constexpr double kNormEps = 1e-8;  // must match layer_forward
}

void layer_backward(const double* dh_out, double* dh_in, const ModelParams& P,
                    const LayerIndex& li, const EdgeCache& ec, const LayerRadialCache& rc,
                    const DropoutMask& mask, const LayerCtx& ctx, ModelParams* grads) {
  const auto& cfg = P.cfg;
  const PathTable& pt = get_path_table(cfg);
  const int N = ec.n_atoms, E = ec.n_edges, C = cfg.channels, Lm = cfg.l_max;
  const int D = cfg.feat_dim(), H = cfg.heads, DA = cfg.d_att;
  const int cph = C / H;
  const int n_paths = pt.size();

  std::vector<double> dmsum(std::size_t(N) * D, 0.0);
  std::vector<double> dhn(std::size_t(N) * D, 0.0);
  std::vector<double> dv(std::size_t(E) * D, 0.0);
  std::vector<double> da(std::size_t(E) * H, 0.0);
  std::vector<double> dlogits(std::size_t(E) * H, 0.0);

  // residual and per-degree output mixer
  const double* w_out = P.p(li.w_out);
  for (int n = 0; n < N; ++n) {
    const double* go = dh_out + std::size_t(n) * D;
    const double* ms = ctx.msum.data() + std::size_t(n) * D;
    double* di = dh_in + std::size_t(n) * D;
    double* dm = dmsum.data() + std::size_t(n) * D;
    for (int i = 0; i < D; ++i) di[i] += go[i];
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0);
      const double* wl = w_out + std::size_t(l) * C * C;
      for (int oc = 0; oc < C; ++oc) {
        const double* row = wl + std::size_t(oc) * C;
        for (int m = 0; m < d; ++m) {
          double g = go[off + oc * d + m];
          for (int ic = 0; ic < C; ++ic) dm[off + ic * d + m] += row[ic] * g;
        }
        if (grads) {
          double* grow = grads->p(li.w_out) + std::size_t(l) * C * C +
                         std::size_t(oc) * C;
          for (int ic = 0; ic < C; ++ic) {
            double s = 0.0;
            for (int m = 0; m < d; ++m) s += go[off + oc * d + m] * ms[off + ic * d + m];
            grow[ic] += s;
          }
        }
      }
    }
  }

  // aggregation: dv and d(attention)
  for (int e = 0; e < E; ++e) {
    if (!mask.keep[e]) continue;
    const double* dm = dmsum.data() + std::size_t(ec.dst[e]) * D;
    const double* v = ctx.v.data() + std::size_t(e) * D;
    const double* a = ctx.att.data() + std::size_t(e) * H;
    double* dve = dv.data() + std::size_t(e) * D;
    double* dae = da.data() + std::size_t(e) * H;
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0);
      for (int c = 0; c < C; ++c) {
        const int h = c / cph;
        double s = 0.0;
        for (int m = 0; m < d; ++m) {
          dve[off + c * d + m] = a[h] * dm[off + c * d + m];
          s += dm[off + c * d + m] * v[off + c * d + m];
        }
        dae[h] += s;
      }
    }
  }

  // softmax backward per (node, head)
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < H; ++h) {
      double s = 0.0;
      for (int e = ec.dst_begin[n]; e < ec.dst_begin[n + 1]; ++e)
        if (mask.keep[e]) s += ctx.att[std::size_t(e) * H + h] * da[std::size_t(e) * H + h];
      for (int e = ec.dst_begin[n]; e < ec.dst_begin[n + 1]; ++e)
        if (mask.keep[e])
          dlogits[std::size_t(e) * H + h] =
              ctx.att[std::size_t(e) * H + h] * (da[std::size_t(e) * H + h] - s);
    }
  }

  // per-edge backward: attention MLP, tensor product, channel mixer, radial MLP
  const double* w_mix = P.p(li.w_mix);
  const double* att_w = P.p(li.att_w);
  const double* att_k = P.p(li.att_k);
  std::vector<double> du(D), dw_rad(std::size_t(n_paths) * C), dq(2 * C), dpre(DA);
  for (int e = 0; e < E; ++e) {
    if (!mask.keep[e]) continue;
    const int t = ec.dst[e], s = ec.src[e];
    const double* dve = dv.data() + std::size_t(e) * D;
    const double* dle = dlogits.data() + std::size_t(e) * H;
    const double* pre = ctx.att_pre.data() + std::size_t(e) * DA;
    const double* act = ctx.att_act.data() + std::size_t(e) * DA;
    const double* hnt = ctx.hn.data() + std::size_t(t) * D;
    const double* hns = ctx.hn.data() + std::size_t(s) * D;

    // attention logits
    for (int i = 0; i < DA; ++i) {
      double dact = 0.0;
      for (int h = 0; h < H; ++h) {
        dact += att_k[std::size_t(i) * H + h] * dle[h];
        if (grads) grads->p(li.att_k)[std::size_t(i) * H + h] += act[i] * dle[h];
      }
      dpre[i] = dact * (pre[i] > 0.0 ? 1.0 : cfg.leaky_slope);
    }
    std::fill(dq.begin(), dq.end(), 0.0);
    for (int i = 0; i < DA; ++i) {
      const double* row = att_w + std::size_t(i) * 2 * C;
      for (int c = 0; c < 2 * C; ++c) dq[c] += row[c] * dpre[i];
      if (grads) {
        double* grow = grads->p(li.att_w) + std::size_t(i) * 2 * C;
        for (int c = 0; c < C; ++c) {
          grow[c] += dpre[i] * hnt[c];
          grow[C + c] += dpre[i] * hns[c];
        }
        grads->p(li.att_b)[i] += dpre[i];
      }
    }
    double* dhnt = dhn.data() + std::size_t(t) * D;
    double* dhns = dhn.data() + std::size_t(s) * D;
    for (int c = 0; c < C; ++c) {
      dhnt[c] += dq[c];
      dhns[c] += dq[C + c];
    }

    // tensor product
    std::fill(du.begin(), du.end(), 0.0);
    const double* Y = ec.Y.data() + std::size_t(e) * cfg.sh_dim();
    const double* ip = ctx.ip.data() + std::size_t(e) * pt.ip_stride;
    const double* w = rc.w.data() + std::size_t(e) * n_paths * C;
    const double* ue = ctx.u.data() + std::size_t(e) * D;
    for (int p = 0; p < n_paths; ++p) {
      const auto& path = pt.paths[p];
      const int d3 = 2 * path.l3 + 1;
      const double* yb = Y + path.l2 * path.l2;
      for (int c = 0; c < C; ++c) {
        const double* dvb = dve + cfg.block_offset(path.l3, c);
        const double* ipc = ip + path.ip_offset + c * d3;
        double dwv = 0.0;
        for (int m = 0; m < d3; ++m) dwv += dvb[m] * ipc[m];
        dw_rad[p * C + c] = dwv;
        irreps::cg_contract_adj_f(*path.cg, yb, dvb, du.data() + cfg.block_offset(path.l1, c),
                                  w[p * C + c]);
      }
    }
    if (grads) {
      // radial MLP sees only geometry; gradients flow into its weights only
      ModelParams& g = *grads;
      const double* rb = ec.rb.data() + std::size_t(e) * cfg.num_basis;
      const double* rpre = rc.pre.data() + std::size_t(e) * cfg.d_rad;
      const double* w2 = P.p(li.rad_w2);
      for (int i = 0; i < cfg.d_rad; ++i) {
        double dsilu = 0.0;
        for (int o = 0; o < n_paths * C; ++o)
          dsilu += w2[std::size_t(o) * cfg.d_rad + i] * ec.env[e] * dw_rad[o];
        double dp = dsilu * silu_grad(rpre[i]);
        g.p(li.rad_b1)[i] += dp;
        double* row = g.p(li.rad_w1) + std::size_t(i) * cfg.num_basis;
        for (int j = 0; j < cfg.num_basis; ++j) row[j] += dp * rb[j];
      }
      for (int o = 0; o < n_paths * C; ++o) {
        double dd = ec.env[e] * dw_rad[o];
        g.p(li.rad_b2)[o] += dd;
        double* row = g.p(li.rad_w2) + std::size_t(o) * cfg.d_rad;
        for (int i = 0; i < cfg.d_rad; ++i) row[i] += dd * silu(rpre[i]);
      }
    }

    // channel mixer
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0);
      const double* wl = w_mix + std::size_t(l) * C * 2 * C;
      for (int oc = 0; oc < C; ++oc) {
        const double* row = wl + std::size_t(oc) * 2 * C;
        for (int m = 0; m < d; ++m) {
          double g = du[off + oc * d + m];
          if (g == 0.0) continue;
          for (int ic = 0; ic < C; ++ic) {
            dhnt[off + ic * d + m] += row[ic] * g;
            dhns[off + ic * d + m] += row[C + ic] * g;
          }
        }
        if (grads) {
          double* grow = grads->p(li.w_mix) + std::size_t(l) * C * 2 * C +
                         std::size_t(oc) * 2 * C;
          for (int ic = 0; ic < C; ++ic) {
            double st = 0.0, ss = 0.0;
            for (int m = 0; m < d; ++m) {
              st += du[off + oc * d + m] * hnt[off + ic * d + m];
              ss += du[off + oc * d + m] * hns[off + ic * d + m];
            }
            grow[ic] += st;
            grow[C + ic] += ss;
          }
        }
      }
    }
    (void)ue;
  }

  // rmsnorm backward
  const double* gamma = P.p(li.gamma);
  for (int n = 0; n < N; ++n) {
    const double* hi = ctx.h_in.data() + std::size_t(n) * D;
    const double* dy = dhn.data() + std::size_t(n) * D;
    double* di = dh_in + std::size_t(n) * D;
    for (int l = 0; l <= Lm; ++l) {
      const int d = 2 * l + 1, off = cfg.block_offset(l, 0), nb = C * d;
      const double rho = ctx.rho[std::size_t(n) * (Lm + 1) + l];
      double inner = 0.0;
      for (int c = 0; c < C; ++c)
        for (int m = 0; m < d; ++m)
          inner += gamma[l * C + c] * dy[off + c * d + m] * hi[off + c * d + m];
      const double k = inner / (nb * rho * rho * rho);
      for (int c = 0; c < C; ++c) {
        const double g = gamma[l * C + c];
        for (int m = 0; m < d; ++m) {
          const int i = off + c * d + m;
          di[i] += g * dy[i] / rho - hi[i] * k;
        }
        if (grads) {
          double s = 0.0;
          for (int m = 0; m < d; ++m) s += dy[off + c * d + m] * hi[off + c * d + m];
          grads->p(li.gamma)[l * C + c] += s / rho;
        }
      }
    }
  }
  (void)kNormEps;
}

}  // namespace deqff::eqnet
