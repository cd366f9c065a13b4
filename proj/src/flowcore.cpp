#include "flowalign/flowcore.hpp"

#include <cinttypes>
#include <cstring>
#include <fstream>
#include <sstream>

namespace flowalign {

namespace {

void check_same_dim(const Vec& a, const Vec& b, const char* op) {
  if (a.size() != b.size()) {
    std::ostringstream os;
    os << op << ": dimension mismatch (" << a.size() << " vs " << b.size() << ")";
    throw std::invalid_argument(os.str());
  }
}

void gemv(const Matrix& w, const Vec& x, Vec& y) {
  for (int r = 0; r < w.rows; ++r) {
    double s = 0.0;
    const double* row = &w.a[static_cast<std::size_t>(r) * w.cols];
    for (int c = 0; c < w.cols; ++c) s += row[c] * x[static_cast<std::size_t>(c)];
    y[static_cast<std::size_t>(r)] = s;
  }
}

// y += W^T x
void gemv_t_add(const Matrix& w, const Vec& x, Vec& y) {
  for (int r = 0; r < w.rows; ++r) {
    const double xr = x[static_cast<std::size_t>(r)];
    const double* row = &w.a[static_cast<std::size_t>(r) * w.cols];
    for (int c = 0; c < w.cols; ++c) y[static_cast<std::size_t>(c)] += row[c] * xr;
  }
}

double xavier_span(int fan_in, int fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

}  // namespace

VelocityField::VelocityField(ModelShape shape, Role role, std::uint64_t init_seed)
    : shape_(shape), role_(role) {
  if (shape.state_dim < 1 || shape.cond_dim < 0 || shape.hidden_width < 1 ||
      shape.hidden_layers < 1)
    throw std::invalid_argument("VelocityField: invalid shape");
  if (shape.time_features % 2 != 0 || shape.time_features < 2)
    throw std::invalid_argument("VelocityField: time_features must be even and >= 2");

  util::Rng rng(init_seed);
  const int L = shape.hidden_layers;
  weights_.reserve(static_cast<std::size_t>(L) + 1);
  biases_.reserve(static_cast<std::size_t>(L) + 1);
  int in = shape.input_dim();
  for (int i = 0; i < L; ++i) {
    Matrix w(shape.hidden_width, in);
    const double s = xavier_span(in, shape.hidden_width);
    for (auto& x : w.a) x = rng.uniform(-s, s);
    weights_.push_back(std::move(w));
    biases_.emplace_back(static_cast<std::size_t>(shape.hidden_width), 0.0);
    in = shape.hidden_width;
  }
  Matrix wout(shape.state_dim, in);
  const double s = xavier_span(in, shape.state_dim);
  for (auto& x : wout.a) x = rng.uniform(-s, s);
  weights_.push_back(std::move(wout));
  biases_.emplace_back(static_cast<std::size_t>(shape.state_dim), 0.0);
}

VelocityField VelocityField::frozen_copy() const {
  VelocityField copy = *this;
  copy.role_ = Role::reference;
  return copy;
}

VelocityField VelocityField::spawn_policy(int adapter_rank, std::uint64_t seed) const {
  VelocityField policy = *this;
  policy.role_ = Role::policy;
  policy.adapter_rank_ = 0;
  policy.adapters_.clear();
  if (adapter_rank > 0) policy.attach_adapter(adapter_rank, seed);
  return policy;
}

void VelocityField::attach_adapter(int rank, std::uint64_t seed) {
  require_mutable("attach_adapter");
  if (rank < 1) throw std::invalid_argument("attach_adapter: rank must be >= 1");
  util::Rng rng(seed);
  adapters_.clear();
  for (const auto& w : weights_) {
    Adapter ad;
    ad.up = Matrix(w.rows, rank);
    ad.down = Matrix(rank, w.cols);
    const double s = xavier_span(rank, w.rows);
    for (auto& x : ad.up.a) x = rng.uniform(-s, s);
    // down stays zero: the fresh policy forward equals the base exactly.
    adapters_.push_back(std::move(ad));
  }
  adapter_rank_ = rank;
}

Vec VelocityField::time_encode(double t) const {
  Vec f(static_cast<std::size_t>(shape_.time_features));
  double freq = M_PI;
  for (int k = 0; k < shape_.time_features / 2; ++k) {
    f[static_cast<std::size_t>(2 * k)] = std::sin(freq * t);
    f[static_cast<std::size_t>(2 * k + 1)] = std::cos(freq * t);
    freq *= 2.0;
  }
  return f;
}

void VelocityField::apply_layer(int layer, const Vec& in, Vec& out) const {
  const Matrix& w = weights_[static_cast<std::size_t>(layer)];
  out.assign(static_cast<std::size_t>(w.rows), 0.0);
  gemv(w, in, out);
  if (adapter_rank_ > 0) {
    const Adapter& ad = adapters_[static_cast<std::size_t>(layer)];
    Vec mid(static_cast<std::size_t>(adapter_rank_), 0.0);
    gemv(ad.down, in, mid);
    for (int r = 0; r < ad.up.rows; ++r) {
      double s = 0.0;
      const double* row = &ad.up.a[static_cast<std::size_t>(r) * ad.up.cols];
      for (int k = 0; k < adapter_rank_; ++k) s += row[k] * mid[static_cast<std::size_t>(k)];
      out[static_cast<std::size_t>(r)] += s;
    }
  }
  const Vec& b = biases_[static_cast<std::size_t>(layer)];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
}

Vec VelocityField::forward(const Vec& z, double t, const Vec& c) const {
  return forward_trace(z, t, c).output;
}

VelocityField::ForwardTrace VelocityField::forward_trace(const Vec& z, double t,
                                                         const Vec& c) const {
  if (static_cast<int>(z.size()) != shape_.state_dim)
    throw std::invalid_argument("forward: state dimension mismatch");
  if (static_cast<int>(c.size()) != shape_.cond_dim)
    throw std::invalid_argument("forward: condition dimension mismatch");

  ForwardTrace tr;
  tr.input.reserve(static_cast<std::size_t>(shape_.input_dim()));
  tr.input.insert(tr.input.end(), z.begin(), z.end());
  const Vec tf = time_encode(t);
  tr.input.insert(tr.input.end(), tf.begin(), tf.end());
  tr.input.insert(tr.input.end(), c.begin(), c.end());

  const int L = shape_.hidden_layers;
  tr.hidden.resize(static_cast<std::size_t>(L));
  const Vec* cur = &tr.input;
  Vec act;
  for (int i = 0; i < L; ++i) {
    apply_layer(i, *cur, act);
    for (auto& x : act) x = std::tanh(x);
    tr.hidden[static_cast<std::size_t>(i)] = act;
    cur = &tr.hidden[static_cast<std::size_t>(i)];
  }
  apply_layer(L, *cur, tr.output);
  return tr;
}

void VelocityField::backward(const ForwardTrace& trace, const Vec& dLdy, Vec& grad,
                             double scale) const {
  require_mutable("backward");
  if (static_cast<int>(grad.size()) != num_trainable())
    throw std::invalid_argument("backward: gradient buffer size mismatch");

  const int L = shape_.hidden_layers;
  Vec delta = dLdy;

  // Offsets of each layer's block in the flat trainable vector, counted from
  // the back as we walk layers top-down.
  std::vector<std::size_t> offsets(static_cast<std::size_t>(L) + 1);
  std::size_t off = 0;
  for (int i = 0; i <= L; ++i) {
    offsets[static_cast<std::size_t>(i)] = off;
    const Matrix& w = weights_[static_cast<std::size_t>(i)];
    if (adapter_rank_ > 0)
      off += static_cast<std::size_t>(w.rows + w.cols) * adapter_rank_;
    else
      off += static_cast<std::size_t>(w.rows) * w.cols + static_cast<std::size_t>(w.rows);
  }

  for (int layer = L; layer >= 0; --layer) {
    const Vec& in = (layer == 0) ? trace.input : trace.hidden[static_cast<std::size_t>(layer - 1)];
    const Matrix& w = weights_[static_cast<std::size_t>(layer)];
    double* gbase = grad.data() + offsets[static_cast<std::size_t>(layer)];

    if (adapter_rank_ > 0) {
      const Adapter& ad = adapters_[static_cast<std::size_t>(layer)];
      // d(up) = delta (down in)^T, d(down) = (up^T delta) in^T
      Vec mid(static_cast<std::size_t>(adapter_rank_), 0.0);
      gemv(ad.down, in, mid);
      Vec upT_delta(static_cast<std::size_t>(adapter_rank_), 0.0);
      for (int r = 0; r < ad.up.rows; ++r) {
        const double dr = delta[static_cast<std::size_t>(r)];
        const double* row = &ad.up.a[static_cast<std::size_t>(r) * ad.up.cols];
        double* gup = gbase + static_cast<std::size_t>(r) * adapter_rank_;
        for (int k = 0; k < adapter_rank_; ++k) {
          gup[k] += scale * dr * mid[static_cast<std::size_t>(k)];
          upT_delta[static_cast<std::size_t>(k)] += row[k] * dr;
        }
      }
      double* gdown = gbase + static_cast<std::size_t>(ad.up.rows) * adapter_rank_;
      for (int k = 0; k < adapter_rank_; ++k) {
        const double uk = scale * upT_delta[static_cast<std::size_t>(k)];
        double* grow = gdown + static_cast<std::size_t>(k) * w.cols;
        for (int cix = 0; cix < w.cols; ++cix) grow[cix] += uk * in[static_cast<std::size_t>(cix)];
      }
    } else {
      for (int r = 0; r < w.rows; ++r) {
        const double dr = scale * delta[static_cast<std::size_t>(r)];
        double* grow = gbase + static_cast<std::size_t>(r) * w.cols;
        for (int cix = 0; cix < w.cols; ++cix) grow[cix] += dr * in[static_cast<std::size_t>(cix)];
      }
      double* gb = gbase + static_cast<std::size_t>(w.rows) * w.cols;
      for (int r = 0; r < w.rows; ++r) gb[r] += scale * delta[static_cast<std::size_t>(r)];
    }

    if (layer > 0) {
      Vec din(in.size(), 0.0);
      gemv_t_add(w, delta, din);
      if (adapter_rank_ > 0) {
        const Adapter& ad = adapters_[static_cast<std::size_t>(layer)];
        Vec upT_delta(static_cast<std::size_t>(adapter_rank_), 0.0);
        for (int r = 0; r < ad.up.rows; ++r) {
          const double dr = delta[static_cast<std::size_t>(r)];
          const double* row = &ad.up.a[static_cast<std::size_t>(r) * ad.up.cols];
          for (int k = 0; k < adapter_rank_; ++k)
            upT_delta[static_cast<std::size_t>(k)] += row[k] * dr;
        }
        gemv_t_add(ad.down, upT_delta, din);
      }
      const Vec& h = trace.hidden[static_cast<std::size_t>(layer - 1)];
      delta.assign(h.size(), 0.0);
      for (std::size_t i = 0; i < h.size(); ++i) delta[i] = din[i] * (1.0 - h[i] * h[i]);
    }
  }
}

int VelocityField::num_trainable() const {
  if (role_ == Role::reference) return 0;
  std::size_t n = 0;
  for (const auto& w : weights_) {
    if (adapter_rank_ > 0)
      n += static_cast<std::size_t>(w.rows + w.cols) * adapter_rank_;
    else
      n += static_cast<std::size_t>(w.rows) * w.cols + static_cast<std::size_t>(w.rows);
  }
  return static_cast<int>(n);
}

Vec VelocityField::get_trainable() const {
  require_mutable("get_trainable");
  Vec theta;
  theta.reserve(static_cast<std::size_t>(num_trainable()));
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (adapter_rank_ > 0) {
      const Adapter& ad = adapters_[i];
      theta.insert(theta.end(), ad.up.a.begin(), ad.up.a.end());
      theta.insert(theta.end(), ad.down.a.begin(), ad.down.a.end());
    } else {
      theta.insert(theta.end(), weights_[i].a.begin(), weights_[i].a.end());
      theta.insert(theta.end(), biases_[i].begin(), biases_[i].end());
    }
  }
  return theta;
}

void VelocityField::set_trainable(const Vec& theta) {
  require_mutable("set_trainable");
  if (static_cast<int>(theta.size()) != num_trainable())
    throw std::invalid_argument("set_trainable: parameter vector size mismatch");
  std::size_t p = 0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (adapter_rank_ > 0) {
      Adapter& ad = adapters_[i];
      std::copy(theta.begin() + p, theta.begin() + p + ad.up.a.size(), ad.up.a.begin());
      p += ad.up.a.size();
      std::copy(theta.begin() + p, theta.begin() + p + ad.down.a.size(), ad.down.a.begin());
      p += ad.down.a.size();
    } else {
      std::copy(theta.begin() + p, theta.begin() + p + weights_[i].a.size(),
                weights_[i].a.begin());
      p += weights_[i].a.size();
      std::copy(theta.begin() + p, theta.begin() + p + biases_[i].size(), biases_[i].begin());
      p += biases_[i].size();
    }
  }
}

Matrix VelocityField::effective_weight(int layer) const {
  Matrix w = weights_[static_cast<std::size_t>(layer)];
  if (adapter_rank_ > 0) {
    const Adapter& ad = adapters_[static_cast<std::size_t>(layer)];
    for (int r = 0; r < w.rows; ++r)
      for (int c = 0; c < w.cols; ++c) {
        double s = 0.0;
        for (int k = 0; k < adapter_rank_; ++k) s += ad.up(r, k) * ad.down(k, c);
        w(r, c) += s;
      }
  }
  return w;
}

double VelocityField::deviation_from(const VelocityField& other) const {
  if (!(shape_ == other.shape_))
    throw std::invalid_argument("deviation_from: shape mismatch");
  double acc = 0.0;
  for (int i = 0; i < n_layers(); ++i) {
    const Matrix wa = effective_weight(i);
    const Matrix wb = other.effective_weight(i);
    for (std::size_t k = 0; k < wa.a.size(); ++k) {
      const double d = wa.a[k] - wb.a[k];
      acc += d * d;
    }
    const Vec& ba = biases_[static_cast<std::size_t>(i)];
    const Vec& bb = other.biases_[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < ba.size(); ++k) {
      const double d = ba[k] - bb[k];
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

std::uint64_t VelocityField::param_hash() const {
  // FNV-1a over the raw parameter bytes.
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const double* data, std::size_t n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  };
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    mix(weights_[i].a.data(), weights_[i].a.size());
    mix(biases_[i].data(), biases_[i].size());
  }
  for (const auto& ad : adapters_) {
    mix(ad.up.a.data(), ad.up.a.size());
    mix(ad.down.a.data(), ad.down.a.size());
  }
  return h;
}

void VelocityField::require_mutable(const char* op) const {
  if (role_ == Role::reference) {
    std::ostringstream os;
    os << op << ": model is reference-role (frozen)";
    throw std::logic_error(os.str());
  }
}

// --- checkpoint container (format v1, documented in docs/formats.md) ----

void VelocityField::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save: cannot open " + path);
  out << "flowalign-ckpt 1\n";
  out << "role " << (role_ == Role::reference ? "reference" : "policy") << "\n";
  out << "shape " << shape_.state_dim << " " << shape_.cond_dim << " " << shape_.hidden_width
      << " " << shape_.hidden_layers << " " << shape_.time_features << "\n";
  out << "adapter_rank " << adapter_rank_ << "\n";
  out << "layers " << n_layers() << "\n";
  for (int i = 0; i < n_layers(); ++i) {
    const Matrix& w = weights_[static_cast<std::size_t>(i)];
    out << "layer " << i << " " << w.rows << " " << w.cols << "\n";
    for (int r = 0; r < w.rows; ++r) {
      out << "W";
      for (int c = 0; c < w.cols; ++c) out << " " << util::fmt_hex(w(r, c));
      out << "\n";
    }
    out << "b";
    for (double x : biases_[static_cast<std::size_t>(i)]) out << " " << util::fmt_hex(x);
    out << "\n";
    if (adapter_rank_ > 0) {
      const Adapter& ad = adapters_[static_cast<std::size_t>(i)];
      for (int r = 0; r < ad.up.rows; ++r) {
        out << "A";
        for (int c = 0; c < ad.up.cols; ++c) out << " " << util::fmt_hex(ad.up(r, c));
        out << "\n";
      }
      for (int r = 0; r < ad.down.rows; ++r) {
        out << "B";
        for (int c = 0; c < ad.down.cols; ++c) out << " " << util::fmt_hex(ad.down(r, c));
        out << "\n";
      }
    }
  }
  out << "end\n";
  if (!out) throw std::runtime_error("save: write failed for " + path);
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

double parse_hex_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw std::runtime_error("checkpoint: bad float token '" + s + "'");
  return v;
}

void read_row(std::ifstream& in, const char* tag, int n, double* dst) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated file");
  auto toks = split_ws(line);
  if (toks.empty() || toks[0] != tag || static_cast<int>(toks.size()) != n + 1)
    throw std::runtime_error(std::string("checkpoint: expected row '") + tag + "'");
  for (int i = 0; i < n; ++i) dst[i] = parse_hex_double(toks[static_cast<std::size_t>(i + 1)]);
}

}  // namespace

VelocityField VelocityField::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load: cannot open " + path);
  std::string line;

  auto expect_line = [&](const char* what) -> std::vector<std::string> {
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated file");
    auto toks = split_ws(line);
    if (toks.empty() || toks[0] != what)
      throw std::runtime_error(std::string("checkpoint: expected '") + what + "' line");
    return toks;
  };

  auto header = expect_line("flowalign-ckpt");
  if (header.size() != 2 || header[1] != "1")
    throw std::runtime_error("checkpoint: unsupported version");

  auto role_toks = expect_line("role");
  if (role_toks.size() != 2) throw std::runtime_error("checkpoint: bad role line");
  Role role;
  if (role_toks[1] == "reference")
    role = Role::reference;
  else if (role_toks[1] == "policy")
    role = Role::policy;
  else
    throw std::runtime_error("checkpoint: unknown role '" + role_toks[1] + "'");

  auto shape_toks = expect_line("shape");
  if (shape_toks.size() != 6) throw std::runtime_error("checkpoint: bad shape line");
  ModelShape shape;
  shape.state_dim = std::stoi(shape_toks[1]);
  shape.cond_dim = std::stoi(shape_toks[2]);
  shape.hidden_width = std::stoi(shape_toks[3]);
  shape.hidden_layers = std::stoi(shape_toks[4]);
  shape.time_features = std::stoi(shape_toks[5]);

  auto rank_toks = expect_line("adapter_rank");
  if (rank_toks.size() != 2) throw std::runtime_error("checkpoint: bad adapter_rank line");
  const int rank = std::stoi(rank_toks[1]);

  auto layers_toks = expect_line("layers");
  if (layers_toks.size() != 2) throw std::runtime_error("checkpoint: bad layers line");
  const int n_layers = std::stoi(layers_toks[1]);
  if (n_layers != shape.hidden_layers + 1)
    throw std::runtime_error("checkpoint: layer count inconsistent with shape");

  VelocityField m;
  m.shape_ = shape;
  m.role_ = role;
  m.adapter_rank_ = rank;
  m.weights_.resize(static_cast<std::size_t>(n_layers));
  m.biases_.resize(static_cast<std::size_t>(n_layers));
  if (rank > 0) m.adapters_.resize(static_cast<std::size_t>(n_layers));

  for (int i = 0; i < n_layers; ++i) {
    auto lt = expect_line("layer");
    if (lt.size() != 4 || std::stoi(lt[1]) != i)
      throw std::runtime_error("checkpoint: bad layer header");
    const int rows = std::stoi(lt[2]);
    const int cols = std::stoi(lt[3]);
    Matrix w(rows, cols);
    for (int r = 0; r < rows; ++r) read_row(in, "W", cols, &w.a[static_cast<std::size_t>(r) * cols]);
    m.weights_[static_cast<std::size_t>(i)] = std::move(w);
    Vec b(static_cast<std::size_t>(rows));
    read_row(in, "b", rows, b.data());
    m.biases_[static_cast<std::size_t>(i)] = std::move(b);
    if (rank > 0) {
      Adapter ad;
      ad.up = Matrix(rows, rank);
      ad.down = Matrix(rank, cols);
      for (int r = 0; r < rows; ++r)
        read_row(in, "A", rank, &ad.up.a[static_cast<std::size_t>(r) * rank]);
      for (int r = 0; r < rank; ++r)
        read_row(in, "B", cols, &ad.down.a[static_cast<std::size_t>(r) * cols]);
      m.adapters_[static_cast<std::size_t>(i)] = std::move(ad);
    }
  }
  expect_line("end");
  return m;
}

// --- free operations -----------------------------------------------------

Vec interpolate(const Vec& z0, const Vec& z1, double t) {
  check_same_dim(z0, z1, "interpolate");
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("interpolate: t must lie in [0,1]");
  Vec zt(z0.size());
  for (std::size_t i = 0; i < z0.size(); ++i) zt[i] = t * z1[i] + (1.0 - t) * z0[i];
  return zt;
}

Vec target_velocity(const Vec& z0, const Vec& z1) {
  check_same_dim(z0, z1, "target_velocity");
  Vec v(z0.size());
  for (std::size_t i = 0; i < z0.size(); ++i) v[i] = z1[i] - z0[i];
  return v;
}

FlowSample make_flow_sample(Vec z0, Vec z1, double t, Vec c, Mask mask) {
  FlowSample s;
  s.zt = interpolate(z0, z1, t);
  s.v = target_velocity(z0, z1);
  if (!mask.empty() && mask.size() != z0.size())
    throw std::invalid_argument("make_flow_sample: mask dimension mismatch");
  for (auto m : mask)
    if (m != 0 && m != 1) throw std::invalid_argument("make_flow_sample: mask must be binary");
  s.z0 = std::move(z0);
  s.z1 = std::move(z1);
  s.t = t;
  s.c = std::move(c);
  s.mask = std::move(mask);
  return s;
}

LossGrad fm_loss(const VelocityField& policy, std::span<const FlowSample> batch) {
  if (policy.role() != Role::policy)
    throw std::invalid_argument("fm_loss: model must be policy-role");
  if (batch.empty()) throw std::invalid_argument("fm_loss: empty batch");

  LossGrad out;
  out.grad.assign(static_cast<std::size_t>(policy.num_trainable()), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const FlowSample& s = batch[i];
    const auto tr = policy.forward_trace(s.zt, s.t, s.c);
    double e = 0.0;
    Vec dLdy(tr.output.size());
    for (std::size_t j = 0; j < tr.output.size(); ++j) {
      const double r = tr.output[j] - s.v[j];
      e += r * r;
      dLdy[j] = 2.0 * r;
    }
    if (!std::isfinite(e)) {
      std::ostringstream os;
      os << "fm_loss: non-finite forward value at sample " << i;
      throw std::runtime_error(os.str());
    }
    out.value += e * inv_n;
    policy.backward(tr, dLdy, out.grad, inv_n);
  }
  return out;
}

double fm_error(const VelocityField& model, std::span<const FlowSample> batch) {
  if (batch.empty()) throw std::invalid_argument("fm_error: empty batch");
  double acc = 0.0;
  for (const FlowSample& s : batch) {
    const Vec y = model.forward(s.zt, s.t, s.c);
    double e = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      const double r = y[j] - s.v[j];
      e += r * r;
    }
    acc += e;
  }
  return acc / static_cast<double>(batch.size());
}

Vec integrate_ode(const VelocityFn& field, Vec z0, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("integrate_ode: n_steps must be >= 1");
  const double h = 1.0 / static_cast<double>(n_steps);
  Vec z = std::move(z0);
  for (int k = 0; k < n_steps; ++k) {
    const double t = static_cast<double>(k) * h;
    const Vec v = field(z, t);
    if (v.size() != z.size()) throw std::runtime_error("integrate_ode: field dimension mismatch");
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += h * v[i];
    if (!util::all_finite(z)) {
      std::ostringstream os;
      os << "integrate_ode: non-finite state at step " << k;
      throw std::runtime_error(os.str());
    }
  }
  return z;
}

Vec sample_ode(const VelocityField& model, const Vec& z0, const Vec& c, int n_steps) {
  return integrate_ode([&](const Vec& z, double t) { return model.forward(z, t, c); }, z0,
                       n_steps);
}

VelocityField adapter_merge(const VelocityField& model) {
  if (!model.has_adapter()) throw std::invalid_argument("adapter_merge: no adapter present");
  VelocityField merged = model;
  for (int i = 0; i < merged.n_layers(); ++i)
    merged.weights_[static_cast<std::size_t>(i)] = model.effective_weight(i);
  merged.adapters_.clear();
  merged.adapter_rank_ = 0;
  return merged;
}

}  // namespace flowalign
