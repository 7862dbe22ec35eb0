#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deqff/common.hpp"
#include "deqff/graph.hpp"
#include "deqff/irreps.hpp"

namespace deqff::eqnet {

struct ModelConfig {
  int l_max = 2;
  int channels = 8;       // multiplicity per degree
  int heads = 1;          // attention heads; channels % heads == 0
  int d_att = 16;         // attention MLP width
  int d_rad = 16;         // radial MLP hidden width
  int d_head = 16;        // energy head hidden width
  int num_basis = 8;      // Gaussian radial basis size
  double r_cut = 5.0;     // Angstrom
  int max_neighbors = 32;
  int n_layers = 2;       // layers in the implicit block / explicit stack
  double path_drop = 0.05;
  int z_max = 10;         // largest atomic number in the embedding table
  double leaky_slope = 0.01;

  int feat_dim() const { return channels * (l_max + 1) * (l_max + 1); }
  int sh_dim() const { return (l_max + 1) * (l_max + 1); }
  // flat offset of block (l, channel) within one node's feature vector
  int block_offset(int l, int c) const { return channels * l * l + c * (2 * l + 1); }
  void validate() const;
};

// Valid tensor-product paths (l1, l2, l3) for degrees up to l_max, in
// lexicographic order. l1 indexes the mixed node features, l2 the edge
// spherical harmonics, l3 the message output degree.
struct PathTable {
  struct Path {
    int l1, l2, l3;
    const irreps::CGTable::Path* cg;
    int ip_offset;  // offset into the per-edge inner-product scratch, per channel group
  };
  std::vector<Path> paths;
  int ip_stride = 0;  // per-edge scratch size: sum over paths of channels*(2*l3+1)

  static PathTable build(const ModelConfig& cfg);
  int size() const { return int(paths.size()); }
};

// thread-local cached table for the given (l_max, channels)
const PathTable& get_path_table(const ModelConfig& cfg);

// One named parameter array. `fan_in` drives initialization.
struct ParamArray {
  std::string name;
  std::vector<double> v;
  int fan_in = 1;
  enum class Init { uniform, zero, one } init = Init::uniform;
};

// Indices into ModelParams::arrays for one attention layer.
struct LayerIndex {
  int gamma;    // (l_max+1)*C rmsnorm gains
  int w_mix;    // per degree: C x 2C channel mixer on concatenated (dst, src)
  int rad_w1, rad_b1, rad_w2, rad_b2;  // radial MLP -> per-path-channel weights
  int att_w, att_b;  // d_att x 2C MLP on concatenated degree-0 features
  int att_k;    // d_att x heads
  int w_out;    // per degree: C x C output mixer
};

struct ParamIndex {
  int atom_emb;                        // (z_max+1) x C
  int emb_rw1, emb_rb1, emb_rw2, emb_rb2;  // embedding radial MLP -> (l_max+1)*C
  int alpha;                           // [1]
  std::vector<LayerIndex> layers;
  LayerIndex fhead;                    // force-head attention layer
  int f_readout;                       // C  (degree-1 channel readout)
  int e_w1, e_b1, e_w2, e_b2;          // energy MLP on degree-0 features
};

struct ModelParams {
  ModelConfig cfg;
  ParamIndex idx;
  std::vector<ParamArray> arrays;

  static ModelParams make(const ModelConfig& cfg);
  // weights ~ uniform(-sqrt(1/fan_in), sqrt(1/fan_in)); biases zero; norm
  // gains one; alpha = 1/sqrt(avg_degree)
  void init(Rng& rng, double avg_degree = 8.0);
  ModelParams zeros_like() const;

  const std::vector<double>& a(int i) const { return arrays[i].v; }
  std::vector<double>& a(int i) { return arrays[i].v; }
  const double* p(int i) const { return arrays[i].v.data(); }
  double* p(int i) { return arrays[i].v.data(); }

  double sq_norm() const;
  void add_scaled(const ModelParams& other, double s);  // this += s * other
  void scale(double s);
  bool shape_equal(const ModelParams& other) const;
};

// Per-edge keep/drop decisions, fixed for the duration of one solve.
struct DropoutMask {
  std::vector<std::uint8_t> keep;
  std::uint64_t seed = 0;

  static DropoutMask all_keep(int n_edges);
  static DropoutMask sample(int n_edges, double rate, std::uint64_t seed);
};

// Geometry-derived quantities shared by every layer evaluation on a sample.
struct EdgeCache {
  int n_atoms = 0;
  int n_edges = 0;
  std::vector<double> Y;       // E x sh_dim, flat spherical harmonics of r_vec
  std::vector<double> rb;      // E x num_basis
  std::vector<double> env;     // E  (cutoff envelope)
  std::vector<double> ln_env;  // E
  std::vector<int> src, dst;   // E
  std::vector<int> dst_begin;  // n_atoms+1, edges are grouped by dst
};
EdgeCache build_edge_cache(const graph::AtomicSystem& system, const graph::EdgeList& edges,
                           const ModelConfig& cfg);

// Radial-MLP outputs for one layer's parameters; constant across solver
// iterations since they depend only on geometry.
struct LayerRadialCache {
  std::vector<double> w;    // E x P x C, already multiplied by the envelope
  std::vector<double> pre;  // E x d_rad (pre-activation, kept for backward)
};
void compute_layer_radial(const ModelParams& P, const LayerIndex& li, const EdgeCache& ec,
                          LayerRadialCache& out);

// Saved intermediates of one layer evaluation, consumed by layer_backward.
struct LayerCtx {
  std::vector<double> h_in;     // N x D
  std::vector<double> hn;       // N x D (normalized)
  std::vector<double> rho;      // N x (l_max+1)
  std::vector<double> u;        // E x D (mixed edge features)
  std::vector<double> ip;       // E x ip_stride (per-path CG inner products)
  std::vector<double> att_pre;  // E x d_att
  std::vector<double> att_act;  // E x d_att
  std::vector<double> logits;   // E x heads
  std::vector<double> att;      // E x heads (softmax weights; 0 for dropped edges)
  std::vector<double> v;        // E x D (messages)
  std::vector<double> msum;     // N x D (attention-weighted aggregation)
};

// h_out = h_in + linear(sum_s a_ts * v_ts). h_out may alias h_in.
void layer_forward(const double* h_in, double* h_out, const ModelParams& P,
                   const LayerIndex& li, const EdgeCache& ec, const LayerRadialCache& rc,
                   const DropoutMask& mask, LayerCtx& ctx);

// Accumulates d(h_in) into dh_in. When grads != nullptr also accumulates
// parameter gradients (grads must be shape_equal to P).
void layer_backward(const double* dh_out, double* dh_in, const ModelParams& P,
                    const LayerIndex& li, const EdgeCache& ec, const LayerRadialCache& rc,
                    const DropoutMask& mask, const LayerCtx& ctx, ModelParams* grads);

struct EmbedCtx {
  std::vector<double> pre;    // E x d_rad radial MLP pre-activation
  std::vector<double> sum_v;  // N x D neighbor sum before the alpha scale
};

// x_out = linear(one-hot(z)) + alpha * sum_{s in N(i)} v(1, 1, r_is)
void embed_forward(const graph::AtomicSystem& system, const EdgeCache& ec,
                   const ModelParams& P, double* x_out, EmbedCtx* ctx);
void embed_backward(const double* dx, const graph::AtomicSystem& system, const EdgeCache& ec,
                    const ModelParams& P, const EmbedCtx& ctx, ModelParams& grads);

struct HeadsCtx {
  LayerCtx f_layer;
  LayerRadialCache f_radial;
  std::vector<double> h_f;    // N x D, features after the force-head layer
  std::vector<double> e_pre;  // N x d_head energy MLP pre-activation
};

struct EnergyForces {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

// Energy: per-node MLP on degree-0 features, summed. Forces: one extra
// attention layer, then the single-channel degree-1 readout mapped to
// Cartesian axes through the Y1 (y,z,x) convention.
EnergyForces heads_forward(const double* h, const ModelParams& P, const EdgeCache& ec,
                           const DropoutMask& mask, HeadsCtx& ctx);
// dh must hold N x D accumulable storage.
void heads_backward(double dE, const std::vector<Vec3>& dF, const double* h, double* dh,
                    const ModelParams& P, const EdgeCache& ec, const DropoutMask& mask,
                    const HeadsCtx& ctx, ModelParams* grads);

// Explicit L-layer baseline: embed, L untied attention layers, heads.
// Requires L == cfg.n_layers (one parameter set per layer) and L >= 1.
EnergyForces explicit_forward(const graph::AtomicSystem& system, const ModelParams& P, int L);

double silu(double x);
double silu_grad(double x);

}  // namespace deqff::eqnet
