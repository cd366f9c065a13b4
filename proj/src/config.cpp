#include "flowalign/config.hpp"

#include <functional>
#include <map>
#include <sstream>

#include "flowalign/report.hpp"

namespace flowalign {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string num_to_string(double v) {
  // Shortest representation that round-trips a double.
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  double back = std::strtod(buf, nullptr);
  for (int prec = 1; prec <= 16; ++prec) {
    char cand[40];
    std::snprintf(cand, sizeof cand, "%.*g", prec, v);
    if (std::strtod(cand, nullptr) == back) return cand;
  }
  return buf;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) throw std::invalid_argument("config: empty grid element");
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size())
      throw std::invalid_argument("config: bad grid element '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("config: empty grid");
  return out;
}

std::string grid_to_string(const std::vector<double>& g) {
  std::string s;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i) s += ",";
    s += num_to_string(g[i]);
  }
  return s;
}

std::vector<ObjectiveKind> parse_objectives(const std::string& s) {
  std::vector<ObjectiveKind> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(objective_from_name(trim(tok)));
  if (out.empty()) throw std::invalid_argument("config: empty objective list");
  return out;
}

std::string objectives_to_string(const std::vector<ObjectiveKind>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += objective_name(v[i]);
  }
  return s;
}

// Key table: one entry per config key with a printer and a parser. The
// serialize order is the table order, which makes round-trips canonical.
struct KeyHandler {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> print;
  std::function<void(ExperimentConfig&, const std::string&)> parse;
};

long parse_int(const std::string& v) {
  std::size_t pos = 0;
  const long x = std::stol(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("config: bad integer '" + v + "'");
  return x;
}

double parse_num(const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size())
    throw std::invalid_argument("config: bad number '" + v + "'");
  return x;
}

const std::vector<KeyHandler>& key_table() {
  static const std::vector<KeyHandler> table = [] {
    std::vector<KeyHandler> t;
    auto add = [&t](std::string key, auto printer, auto parser) {
      t.push_back({std::move(key), printer, parser});
    };
#define INT_KEY(name, field)                                                       \
  add(name, [](const ExperimentConfig& c) { return std::to_string(c.field); },     \
      [](ExperimentConfig& c, const std::string& v) {                              \
        c.field = static_cast<int>(parse_int(v));                                  \
      })
#define NUM_KEY(name, field)                                                       \
  add(name, [](const ExperimentConfig& c) { return num_to_string(c.field); },      \
      [](ExperimentConfig& c, const std::string& v) { c.field = parse_num(v); })

    add("seed", [](const ExperimentConfig& c) { return std::to_string(c.seed); },
        [](ExperimentConfig& c, const std::string& v) {
          c.seed = static_cast<std::uint64_t>(std::stoull(v));
        });
    add("out_dir", [](const ExperimentConfig& c) { return c.out_dir; },
        [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; });

    INT_KEY("scene.n_body", scene.n_body);
    INT_KEY("scene.n_hand", scene.n_hand);
    INT_KEY("scene.cond_dim", scene.cond_dim);
    INT_KEY("scene.n_modes", scene.n_modes);
    NUM_KEY("scene.body_noise", scene.body_noise);
    NUM_KEY("scene.ring_radius", scene.ring_radius);
    NUM_KEY("scene.ring_radius_span", scene.ring_radius_span);
    NUM_KEY("scene.blur_sigma", scene.blur_sigma);
    NUM_KEY("scene.score_norm", scene.score_norm);
    NUM_KEY("scene.mode_flip_prob", scene.mode_flip_prob);
    add("scene.world_seed",
        [](const ExperimentConfig& c) { return std::to_string(c.scene.world_seed); },
        [](ExperimentConfig& c, const std::string& v) {
          c.scene.world_seed = static_cast<std::uint64_t>(std::stoull(v));
        });

    INT_KEY("model.hidden_width", model.hidden_width);
    INT_KEY("model.hidden_layers", model.hidden_layers);
    INT_KEY("model.time_features", model.time_features);

    INT_KEY("pretrain.steps", pretrain.steps);
    INT_KEY("pretrain.batch_size", pretrain.batch_size);
    NUM_KEY("pretrain.learning_rate", pretrain.learning_rate);
    NUM_KEY("pretrain.corrupt_prob", pretrain.corrupt_prob);

    INT_KEY("curate.n_candidates", curate.n_candidates);
    INT_KEY("curate.k_per_condition", curate.k_per_condition);
    NUM_KEY("curate.threshold", curate.threshold);
    NUM_KEY("curate.bad_threshold", curate.bad_threshold);
    INT_KEY("curate.ode_steps", curate.ode_steps);

    add("objective.kind",
        [](const ExperimentConfig& c) { return objective_name(c.train.objective.kind); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.objective.kind = objective_from_name(v);
        });
    NUM_KEY("objective.beta", train.objective.beta);
    NUM_KEY("objective.lambda", train.objective.lambda);
    NUM_KEY("objective.kto_good_weight", train.objective.kto_good_weight);
    NUM_KEY("objective.kto_bad_weight", train.objective.kto_bad_weight);
    INT_KEY("objective.kto_ref_batch", train.objective.kto_ref_batch);
    NUM_KEY("objective.sft_anchor", train.objective.sft_anchor);

    INT_KEY("train.steps", train.steps);
    INT_KEY("train.batch_size", train.batch_size);
    NUM_KEY("train.learning_rate", train.learning_rate);
    add("train.optimizer",
        [](const ExperimentConfig& c) { return optimizer_name(c.train.optimizer); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.optimizer = optimizer_from_name(v);
        });
    INT_KEY("train.adapter_rank", train.adapter_rank);
    INT_KEY("train.eval_every", train.eval_every);
    INT_KEY("train.delta_probe_entries", train.delta_probe_entries);
    INT_KEY("train.delta_probe_tgrid", train.delta_probe_tgrid);

    INT_KEY("eval.t_grid", eval.t_grid);
    INT_KEY("eval.z0_draws", eval.z0_draws);
    add("eval.delta_samples",
        [](const ExperimentConfig& c) { return std::to_string(c.eval.delta_samples); },
        [](ExperimentConfig& c, const std::string& v) { c.eval.delta_samples = parse_int(v); });
    INT_KEY("eval.alignment_cap", eval_alignment_cap);
    INT_KEY("eval.retention", eval_retention);

    add("sweep.beta_grid",
        [](const ExperimentConfig& c) { return grid_to_string(c.sweep.beta_grid); },
        [](ExperimentConfig& c, const std::string& v) { c.sweep.beta_grid = parse_grid(v); });
    add("sweep.lambda_grid",
        [](const ExperimentConfig& c) { return grid_to_string(c.sweep.lambda_grid); },
        [](ExperimentConfig& c, const std::string& v) { c.sweep.lambda_grid = parse_grid(v); });
    add("sweep.objectives",
        [](const ExperimentConfig& c) { return objectives_to_string(c.sweep.objectives); },
        [](ExperimentConfig& c, const std::string& v) {
          c.sweep.objectives = parse_objectives(v);
        });
#undef INT_KEY
#undef NUM_KEY
    return t;
  }();
  return table;
}

}  // namespace

void ExperimentConfig::validate() const {
  scene.validate();
  train.validate();
  if (!(train.learning_rate > 0.0))
    throw std::invalid_argument("config: train.learning_rate must be > 0");
  if (pretrain.steps < 1) throw std::invalid_argument("config: pretrain.steps must be >= 1");
  if (pretrain.batch_size < 1)
    throw std::invalid_argument("config: pretrain.batch_size must be >= 1");
  if (!(pretrain.learning_rate > 0.0))
    throw std::invalid_argument("config: pretrain.learning_rate must be > 0");
  if (pretrain.corrupt_prob < 0.0 || pretrain.corrupt_prob > 1.0)
    throw std::invalid_argument("config: pretrain.corrupt_prob must lie in [0,1]");
  if (curate.k_per_condition < 2)
    throw std::invalid_argument("config: curate.k_per_condition must be >= 2");
  if (curate.n_candidates < curate.k_per_condition)
    throw std::invalid_argument("config: curate.n_candidates too small");
  if (curate.threshold < 0.0 || curate.threshold > 1.0 ||
      curate.bad_threshold < 0.0 || curate.bad_threshold > curate.threshold)
    throw std::invalid_argument("config: curation thresholds out of range");
  if (curate.ode_steps < 1) throw std::invalid_argument("config: curate.ode_steps must be >= 1");
  if (eval.t_grid < 1 || eval.z0_draws < 1 || eval.delta_samples < 1)
    throw std::invalid_argument("config: eval sizes must be >= 1");
  if (eval_alignment_cap < 1 || eval_retention < 1)
    throw std::invalid_argument("config: eval set sizes must be >= 1");
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream os;
  os << "# flowalign experiment configuration\n";
  os << "# objective.beta default comes from the desk-scale pilot sweep; it is\n";
  os << "# not transferable from large-model settings.\n";
  std::string section;
  for (const auto& h : key_table()) {
    const std::string sec = h.key.substr(0, h.key.find('.'));
    if (sec != section && h.key.find('.') != std::string::npos) {
      os << "\n";
      section = sec;
    }
    os << h.key << " = " << h.print(*this) << "\n";
  }
  return os.str();
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::map<std::string, const KeyHandler*> lookup;
  for (const auto& h : key_table()) lookup[h.key] = &h;

  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      std::ostringstream os;
      os << "config line " << lineno << ": expected 'key = value'";
      throw std::invalid_argument(os.str());
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    auto it = lookup.find(key);
    if (it == lookup.end()) {
      std::ostringstream os;
      os << "config line " << lineno << ": unknown key '" << key << "'";
      throw std::invalid_argument(os.str());
    }
    it->second->parse(cfg, value);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return parse(read_text_file(path));
}

void ExperimentConfig::save(const std::string& path) const {
  write_text_file(path, serialize());
}

}  // namespace flowalign
