#include "flowalign/dataworld.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace flowalign {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw std::runtime_error("container: bad float token '" + s + "'");
  return v;
}

void write_vec(std::ofstream& out, const char* tag, const Vec& v) {
  out << tag;
  for (double x : v) out << " " << util::fmt_hex(x);
  out << "\n";
}

Vec read_vec(std::ifstream& in, const char* tag, int n) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("container: truncated file");
  auto toks = split_ws(line);
  if (toks.empty() || toks[0] != tag || static_cast<int>(toks.size()) != n + 1)
    throw std::runtime_error(std::string("container: expected '") + tag + "' row");
  Vec v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = parse_double(toks[static_cast<std::size_t>(i) + 1]);
  return v;
}

void write_scene_header(std::ofstream& out, const SceneSpec& s) {
  out << "scene " << s.n_body << " " << s.n_hand << " " << s.cond_dim << " " << s.n_modes << " "
      << util::fmt_hex(s.body_noise) << " " << util::fmt_hex(s.ring_radius) << " "
      << util::fmt_hex(s.ring_radius_span) << " " << util::fmt_hex(s.blur_sigma) << " "
      << util::fmt_hex(s.score_norm) << " " << util::fmt_hex(s.mode_flip_prob) << " "
      << s.world_seed << "\n";
}

SceneSpec read_scene_header(std::ifstream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("container: truncated file");
  auto toks = split_ws(line);
  if (toks.size() != 12 || toks[0] != "scene")
    throw std::runtime_error("container: bad scene header");
  SceneSpec s;
  s.n_body = std::stoi(toks[1]);
  s.n_hand = std::stoi(toks[2]);
  s.cond_dim = std::stoi(toks[3]);
  s.n_modes = std::stoi(toks[4]);
  s.body_noise = parse_double(toks[5]);
  s.ring_radius = parse_double(toks[6]);
  s.ring_radius_span = parse_double(toks[7]);
  s.blur_sigma = parse_double(toks[8]);
  s.score_norm = parse_double(toks[9]);
  s.mode_flip_prob = parse_double(toks[10]);
  s.world_seed = std::stoull(toks[11]);
  s.validate();
  return s;
}

}  // namespace

void SceneSpec::validate() const {
  if (n_body < 1) throw std::invalid_argument("SceneSpec: n_body must be >= 1");
  if (n_hand < 2 || n_hand % 2 != 0)
    throw std::invalid_argument("SceneSpec: n_hand must be even and >= 2");
  if (cond_dim < 1) throw std::invalid_argument("SceneSpec: cond_dim must be >= 1");
  if (n_modes < 2) throw std::invalid_argument("SceneSpec: n_modes must be >= 2");
  if (body_noise < 0.0 || blur_sigma < 0.0)
    throw std::invalid_argument("SceneSpec: noise scales must be >= 0");
  if (!(ring_radius > 0.0) || ring_radius_span < 0.0 || ring_radius_span >= 1.0)
    throw std::invalid_argument("SceneSpec: ring radius parameters out of range");
  if (!(score_norm > 0.0)) throw std::invalid_argument("SceneSpec: score_norm must be > 0");
  if (mode_flip_prob < 0.0 || mode_flip_prob > 1.0)
    throw std::invalid_argument("SceneSpec: mode_flip_prob must lie in [0,1]");
}

Mask hand_mask(const SceneSpec& spec) {
  spec.validate();
  Mask m(static_cast<std::size_t>(spec.state_dim()), 0);
  for (int i = spec.n_body; i < spec.state_dim(); ++i) m[static_cast<std::size_t>(i)] = 1;
  return m;
}

SceneModel::SceneModel(const SceneSpec& spec) : spec_(spec) {
  spec.validate();
  util::Rng rng(spec.world_seed);
  body_w_.resize(static_cast<std::size_t>(spec.n_body));
  body_phase_.resize(static_cast<std::size_t>(spec.n_body));
  for (int j = 0; j < spec.n_body; ++j) {
    body_w_[static_cast<std::size_t>(j)].resize(static_cast<std::size_t>(spec.cond_dim));
    for (auto& w : body_w_[static_cast<std::size_t>(j)]) w = rng.uniform(-1.0, 1.0);
    body_phase_[static_cast<std::size_t>(j)] = rng.uniform(-0.5, 0.5);
  }
  const int pairs = spec.n_hand / 2;
  ring_rot_w_.resize(static_cast<std::size_t>(pairs));
  ring_radius_w_.resize(static_cast<std::size_t>(pairs));
  for (int p = 0; p < pairs; ++p) {
    ring_rot_w_[static_cast<std::size_t>(p)].resize(static_cast<std::size_t>(spec.cond_dim));
    ring_radius_w_[static_cast<std::size_t>(p)].resize(static_cast<std::size_t>(spec.cond_dim));
    for (auto& w : ring_rot_w_[static_cast<std::size_t>(p)]) w = rng.uniform(-0.5, 0.5);
    for (auto& w : ring_radius_w_[static_cast<std::size_t>(p)]) w = rng.uniform(-1.0, 1.0);
  }
  mode_select_w_.resize(static_cast<std::size_t>(spec.n_modes));
  for (int k = 0; k < spec.n_modes; ++k) {
    mode_select_w_[static_cast<std::size_t>(k)].resize(static_cast<std::size_t>(spec.cond_dim));
    for (auto& w : mode_select_w_[static_cast<std::size_t>(k)]) w = rng.uniform(-1.0, 1.0);
  }
}

int SceneModel::preferred_mode(const Vec& c) const {
  int best = 0;
  double best_score = util::dot(mode_select_w_[0], c);
  for (int k = 1; k < spec_.n_modes; ++k) {
    const double s = util::dot(mode_select_w_[static_cast<std::size_t>(k)], c);
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return best;
}

int SceneModel::mode_index(const Vec& c, util::Rng& rng) const {
  const int preferred = preferred_mode(c);
  if (rng.uniform() < spec_.mode_flip_prob) {
    const int other = rng.uniform_int(spec_.n_modes - 1);
    return other >= preferred ? other + 1 : other;
  }
  return preferred;
}

Vec SceneModel::sample_condition(util::Rng& rng) const {
  Vec c(static_cast<std::size_t>(spec_.cond_dim));
  for (auto& x : c) x = rng.uniform(-1.0, 1.0);
  return c;
}

Vec SceneModel::body_mean(const Vec& c) const {
  Vec b(static_cast<std::size_t>(spec_.n_body));
  for (int j = 0; j < spec_.n_body; ++j) {
    const double a = util::dot(body_w_[static_cast<std::size_t>(j)], c) +
                     body_phase_[static_cast<std::size_t>(j)];
    b[static_cast<std::size_t>(j)] = std::tanh(a);
  }
  return b;
}

Vec SceneModel::hand_mode(const Vec& c, int k) const {
  if (k < 0 || k >= spec_.n_modes) throw std::invalid_argument("hand_mode: bad mode index");
  const int pairs = spec_.n_hand / 2;
  Vec h(static_cast<std::size_t>(spec_.n_hand));
  const double theta_k = 2.0 * M_PI * static_cast<double>(k) / spec_.n_modes;
  for (int p = 0; p < pairs; ++p) {
    const double rot = M_PI * util::dot(ring_rot_w_[static_cast<std::size_t>(p)], c);
    const double radius =
        spec_.ring_radius *
        (1.0 + spec_.ring_radius_span * std::tanh(util::dot(ring_radius_w_[static_cast<std::size_t>(p)], c)));
    h[static_cast<std::size_t>(2 * p)] = radius * std::cos(theta_k + rot);
    h[static_cast<std::size_t>(2 * p + 1)] = radius * std::sin(theta_k + rot);
  }
  return h;
}

Vec SceneModel::clean_sample(const Vec& c, util::Rng& rng) const {
  Vec z(static_cast<std::size_t>(spec_.state_dim()));
  const Vec b = body_mean(c);
  for (int j = 0; j < spec_.n_body; ++j)
    z[static_cast<std::size_t>(j)] = b[static_cast<std::size_t>(j)] + spec_.body_noise * rng.normal();
  const int k = mode_index(c, rng);
  const Vec h = hand_mode(c, k);
  for (int j = 0; j < spec_.n_hand; ++j)
    z[static_cast<std::size_t>(spec_.n_body + j)] = h[static_cast<std::size_t>(j)];
  return z;
}

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::self_generated_curated: return "self_generated_curated";
    case Provenance::paired_winner: return "paired_winner";
    case Provenance::paired_loser: return "paired_loser";
    case Provenance::unpaired_bad: return "unpaired_bad";
  }
  throw std::logic_error("provenance_name: unknown tag");
}

namespace {
Provenance provenance_from_name(const std::string& s) {
  if (s == "self_generated_curated") return Provenance::self_generated_curated;
  if (s == "paired_winner") return Provenance::paired_winner;
  if (s == "paired_loser") return Provenance::paired_loser;
  if (s == "unpaired_bad") return Provenance::unpaired_bad;
  throw std::runtime_error("container: unknown provenance '" + s + "'");
}
}  // namespace

std::vector<std::pair<Vec, Vec>> generate_dataset(const SceneSpec& spec, int n,
                                                  std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  const SceneModel model(spec);
  util::Rng root(seed);
  std::vector<std::pair<Vec, Vec>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    util::Rng rng = root.fork(static_cast<std::uint64_t>(i));
    Vec c = model.sample_condition(rng);
    Vec z = model.clean_sample(c, rng);
    out.emplace_back(std::move(z), std::move(c));
  }
  return out;
}

Vec corrupt_hands(const Vec& z, const SceneSpec& spec, double severity, std::uint64_t seed) {
  spec.validate();
  if (static_cast<int>(z.size()) != spec.state_dim())
    throw std::invalid_argument("corrupt_hands: state dimension mismatch");
  if (!(severity >= 0.0 && severity <= 1.0))
    throw std::invalid_argument("corrupt_hands: severity must lie in [0,1]");
  if (severity == 0.0) return z;

  util::Rng rng(seed);
  Vec out = z;
  const int jump = 1 + rng.uniform_int(spec.n_modes - 1);
  const double blend = severity * rng.uniform();
  const double angle = blend * 2.0 * M_PI * static_cast<double>(jump) / spec.n_modes;
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int p = 0; p < spec.n_hand / 2; ++p) {
    const std::size_t ix = static_cast<std::size_t>(spec.n_body + 2 * p);
    const std::size_t iy = ix + 1;
    const double x = out[ix], y = out[iy];
    out[ix] = ca * x - sa * y + severity * spec.blur_sigma * rng.normal();
    out[iy] = sa * x + ca * y + severity * spec.blur_sigma * rng.normal();
  }
  return out;
}

QualityScore quality_score(const Vec& z, const Vec& c, const SceneSpec& spec) {
  spec.validate();
  if (static_cast<int>(z.size()) != spec.state_dim())
    throw std::invalid_argument("quality_score: state dimension mismatch");
  const SceneModel model(spec);
  double best = -1.0;
  Vec best_err;
  for (int k = 0; k < spec.n_modes; ++k) {
    const Vec h = model.hand_mode(c, k);
    double sq = 0.0;
    Vec err(static_cast<std::size_t>(spec.n_hand));
    for (int j = 0; j < spec.n_hand; ++j) {
      const double d = z[static_cast<std::size_t>(spec.n_body + j)] - h[static_cast<std::size_t>(j)];
      err[static_cast<std::size_t>(j)] = std::abs(d);
      sq += d * d;
    }
    const double dist = std::sqrt(sq);
    if (best < 0.0 || dist < best) {
      best = dist;
      best_err = std::move(err);
    }
  }
  QualityScore q;
  q.hand_err = std::move(best_err);
  const double r = best / spec.score_norm;
  q.value = 1.0 - std::min(1.0, r * r);
  return q;
}

std::string CurationAudit::to_text() const {
  std::ostringstream os;
  os << "curation audit\n"
     << "  status          " << status << "\n"
     << "  conditions      " << n_conditions << "\n"
     << "  k_per_condition " << k_per_condition << "\n"
     << "  candidates      " << n_candidates << "\n"
     << "  threshold       " << util::fmt_fixed(threshold, 4) << "\n"
     << "  bad_threshold   " << util::fmt_fixed(bad_threshold, 4) << "\n"
     << "  good_yield      " << n_good << "\n"
     << "  strict_bad      " << n_bad_strict << "\n"
     << "  strict_pairs    " << n_pairs << "\n"
     << "  pair_cases      case1=" << case1_pairs << " case2=" << case2_pairs
     << " case3=" << case3_pairs << " case4=" << case4_pairs << "\n";
  return os.str();
}

CurationResult curate(const VelocityField& model, const SceneSpec& spec, int n_candidates,
                      int k_per_condition, double threshold, std::uint64_t seed, int ode_steps,
                      double bad_threshold) {
  spec.validate();
  if (k_per_condition < 2) throw std::invalid_argument("curate: k_per_condition must be >= 2");
  if (n_candidates < k_per_condition)
    throw std::invalid_argument("curate: n_candidates must cover at least one condition");
  if (model.shape().state_dim != spec.state_dim() || model.shape().cond_dim != spec.cond_dim)
    throw std::invalid_argument("curate: model shape does not match scene");
  if (!(bad_threshold <= threshold))
    throw std::invalid_argument("curate: bad_threshold must not exceed threshold");

  const SceneModel scene(spec);
  const Mask mask = hand_mask(spec);
  const int n_conditions = n_candidates / k_per_condition;

  CurationResult result;
  result.curated.threshold = threshold;
  result.winners.threshold = threshold;
  result.losers.threshold = threshold;
  result.unpaired_bad.threshold = threshold;

  CurationAudit& audit = result.audit;
  audit.n_conditions = n_conditions;
  audit.k_per_condition = k_per_condition;
  audit.n_candidates = n_conditions * k_per_condition;
  audit.threshold = threshold;
  audit.bad_threshold = bad_threshold;

  util::Rng root(seed);
  for (int ci = 0; ci < n_conditions; ++ci) {
    util::Rng rng = root.fork(static_cast<std::uint64_t>(ci));
    const Vec c = scene.sample_condition(rng);

    std::vector<PrefEntry> good, bad;
    std::vector<char> bands;
    for (int s = 0; s < k_per_condition; ++s) {
      Vec z0 = rng.normal_vec(spec.state_dim());
      Vec endpoint = sample_ode(model, z0, c, ode_steps);
      const QualityScore q = quality_score(endpoint, c, spec);

      ScoreRow row;
      row.condition = ci;
      row.sample = s;
      row.score = q.value;
      row.band = (q.value >= threshold) ? 'g' : (q.value <= bad_threshold ? 'b' : 'm');
      bands.push_back(row.band);
      result.scores.push_back(row);

      PrefEntry e;
      e.z1 = std::move(endpoint);
      e.c = c;
      e.mask = mask;
      e.score = q.value;
      if (row.band == 'g') {
        e.tag = Provenance::self_generated_curated;
        good.push_back(std::move(e));
      } else if (row.band == 'b') {
        e.tag = Provenance::unpaired_bad;
        bad.push_back(std::move(e));
      }
    }

    for (std::size_t i = 0; i < bands.size(); ++i)
      for (std::size_t j = i + 1; j < bands.size(); ++j) {
        const bool gi = bands[i] == 'g', gj = bands[j] == 'g';
        const bool bi = bands[i] == 'b', bj = bands[j] == 'b';
        if (gi && gj)
          ++audit.case1_pairs;
        else if (bi && bj)
          ++audit.case2_pairs;
        else if ((gi && bj) || (bi && gj))
          ++audit.case4_pairs;
        else
          ++audit.case3_pairs;
      }

    std::sort(good.begin(), good.end(),
              [](const PrefEntry& a, const PrefEntry& b) { return a.score > b.score; });
    std::sort(bad.begin(), bad.end(),
              [](const PrefEntry& a, const PrefEntry& b) { return a.score < b.score; });

    const std::size_t m = std::min(good.size(), bad.size());
    for (std::size_t i = 0; i < m; ++i) {
      PrefEntry w = good[i];
      w.tag = Provenance::paired_winner;
      PrefEntry l = bad[i];
      l.tag = Provenance::paired_loser;
      result.winners.entries.push_back(std::move(w));
      result.losers.entries.push_back(std::move(l));
    }
    audit.n_pairs += static_cast<int>(m);
    audit.n_good += static_cast<int>(good.size());
    audit.n_bad_strict += static_cast<int>(bad.size());
    for (auto& e : good) result.curated.entries.push_back(std::move(e));
    for (auto& e : bad) result.unpaired_bad.entries.push_back(std::move(e));
  }

  audit.status = result.curated.entries.empty() ? "empty_curated_set" : "ok";
  return result;
}

// --- containers ----------------------------------------------------------

void save_dataset(const std::string& path, const SceneSpec& spec,
                  const std::vector<std::pair<Vec, Vec>>& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  out << "flowalign-dataset 1\n";
  write_scene_header(out, spec);
  out << "entries " << data.size() << "\n";
  for (const auto& [z, c] : data) {
    write_vec(out, "z", z);
    write_vec(out, "c", c);
  }
  out << "end\n";
  if (!out) throw std::runtime_error("save_dataset: write failed");
}

std::vector<std::pair<Vec, Vec>> load_dataset(const std::string& path, SceneSpec* spec_out) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "flowalign-dataset 1")
    throw std::runtime_error("load_dataset: unsupported container");
  const SceneSpec spec = read_scene_header(in);
  if (!std::getline(in, line)) throw std::runtime_error("load_dataset: truncated file");
  auto toks = split_ws(line);
  if (toks.size() != 2 || toks[0] != "entries")
    throw std::runtime_error("load_dataset: bad entries line");
  const long n = std::stol(toks[1]);
  std::vector<std::pair<Vec, Vec>> data;
  data.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    Vec z = read_vec(in, "z", spec.state_dim());
    Vec c = read_vec(in, "c", spec.cond_dim);
    data.emplace_back(std::move(z), std::move(c));
  }
  if (!std::getline(in, line) || line != "end")
    throw std::runtime_error("load_dataset: missing end marker");
  if (spec_out != nullptr) *spec_out = spec;
  return data;
}

void save_preference_set(const std::string& path, const SceneSpec& spec,
                         const PreferenceSet& set, const CurationAudit* audit) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_preference_set: cannot open " + path);
  out << "flowalign-prefset 1\n";
  write_scene_header(out, spec);
  out << "threshold " << util::fmt_hex(set.threshold) << "\n";
  out << "entries " << set.entries.size() << "\n";
  for (const auto& e : set.entries) {
    out << "tag " << provenance_name(e.tag) << " " << util::fmt_hex(e.score) << "\n";
    write_vec(out, "z", e.z1);
    write_vec(out, "c", e.c);
    out << "m";
    for (auto b : e.mask) out << " " << static_cast<int>(b);
    out << "\n";
  }
  if (audit != nullptr) {
    std::istringstream audit_text(audit->to_text());
    std::string aline;
    while (std::getline(audit_text, aline)) out << "# " << aline << "\n";
  }
  out << "end\n";
  if (!out) throw std::runtime_error("save_preference_set: write failed");
}

PreferenceSet load_preference_set(const std::string& path, SceneSpec* spec_out) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_preference_set: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "flowalign-prefset 1")
    throw std::runtime_error("load_preference_set: unsupported container");
  const SceneSpec spec = read_scene_header(in);

  PreferenceSet set;
  if (!std::getline(in, line)) throw std::runtime_error("load_preference_set: truncated file");
  auto toks = split_ws(line);
  if (toks.size() != 2 || toks[0] != "threshold")
    throw std::runtime_error("load_preference_set: bad threshold line");
  set.threshold = parse_double(toks[1]);

  if (!std::getline(in, line)) throw std::runtime_error("load_preference_set: truncated file");
  toks = split_ws(line);
  if (toks.size() != 2 || toks[0] != "entries")
    throw std::runtime_error("load_preference_set: bad entries line");
  const long n = std::stol(toks[1]);

  for (long i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("load_preference_set: truncated file");
    toks = split_ws(line);
    if (toks.size() != 3 || toks[0] != "tag")
      throw std::runtime_error("load_preference_set: bad tag line");
    PrefEntry e;
    e.tag = provenance_from_name(toks[1]);
    e.score = parse_double(toks[2]);
    e.z1 = read_vec(in, "z", spec.state_dim());
    e.c = read_vec(in, "c", spec.cond_dim);
    if (!std::getline(in, line)) throw std::runtime_error("load_preference_set: truncated file");
    toks = split_ws(line);
    if (toks.empty() || toks[0] != "m" ||
        static_cast<int>(toks.size()) != spec.state_dim() + 1)
      throw std::runtime_error("load_preference_set: bad mask row");
    e.mask.resize(static_cast<std::size_t>(spec.state_dim()));
    for (int j = 0; j < spec.state_dim(); ++j)
      e.mask[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(std::stoi(toks[static_cast<std::size_t>(j) + 1]));
    set.entries.push_back(std::move(e));
  }
  while (std::getline(in, line)) {
    if (line == "end") {
      if (spec_out != nullptr) *spec_out = spec;
      return set;
    }
    if (line.empty() || line[0] != '#')
      throw std::runtime_error("load_preference_set: unexpected trailing content");
  }
  throw std::runtime_error("load_preference_set: missing end marker");
}

std::string scores_to_csv(const std::vector<ScoreRow>& rows) {
  std::ostringstream os;
  os << "# quality_score is a synthetic proxy criterion, not a human annotation\n";
  os << "condition,sample,score,band\n";
  for (const auto& r : rows)
    os << r.condition << "," << r.sample << "," << util::fmt_sci(r.score) << "," << r.band
       << "\n";
  return os.str();
}

}  // namespace flowalign
