// SPDX-License-Identifier: Apache-2.0
#include "probgen/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace probgen {

using nlohmann::json;

std::string config_digest(const json& config) {
  const std::string dump = config.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  require(ckpt.layout.total() == ckpt.params.size(),
          "save_checkpoint: layout/parameter length mismatch");
  out << "PROBGEN-CKPT 1\n";
  out << "family " << ckpt.family << "\n";
  out << "digest " << config_digest(ckpt.config) << "\n";
  out << "config " << ckpt.config.dump() << "\n";
  out << "layout " << ckpt.layout.entries.size() << "\n";
  for (const auto& e : ckpt.layout.entries) {
    out << e.name;
    for (long dim : e.shape) out << " " << dim;
    out << "\n";
  }
  out << "params " << ckpt.params.size() << "\n";
  for (long i = 0; i < ckpt.params.size(); ++i) {
    const float f = static_cast<float>(ckpt.params[i]);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    const unsigned char bytes[4] = {
        static_cast<unsigned char>(bits & 0xff), static_cast<unsigned char>((bits >> 8) & 0xff),
        static_cast<unsigned char>((bits >> 16) & 0xff),
        static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_checkpoint: cannot open " + path);
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) throw FormatError(std::string("load_checkpoint: missing ") + what);
    return line;
  };
  if (next_line("magic") != "PROBGEN-CKPT 1")
    throw FormatError("load_checkpoint: bad magic line", 1);
  Checkpoint ckpt;
  {
    std::istringstream ls(next_line("family"));
    std::string key;
    ls >> key >> ckpt.family;
    if (key != "family") throw FormatError("load_checkpoint: expected family line", 2);
  }
  std::string digest;
  {
    std::istringstream ls(next_line("digest"));
    std::string key;
    ls >> key >> digest;
    if (key != "digest") throw FormatError("load_checkpoint: expected digest line", 3);
  }
  {
    next_line("config");
    if (line.rfind("config ", 0) != 0)
      throw FormatError("load_checkpoint: expected config line", 4);
    ckpt.config = json::parse(line.substr(7));
  }
  if (config_digest(ckpt.config) != digest)
    throw FormatError("load_checkpoint: config digest mismatch");
  long n_entries = 0;
  {
    std::istringstream ls(next_line("layout"));
    std::string key;
    ls >> key >> n_entries;
    if (key != "layout") throw FormatError("load_checkpoint: expected layout line", 5);
  }
  for (long i = 0; i < n_entries; ++i) {
    std::istringstream ls(next_line("layout entry"));
    LayoutEntry e;
    ls >> e.name;
    long dim;
    while (ls >> dim) e.shape.push_back(dim);
    ckpt.layout.entries.push_back(std::move(e));
  }
  long n_params = 0;
  {
    std::istringstream ls(next_line("params"));
    std::string key;
    ls >> key >> n_params;
    if (key != "params") throw FormatError("load_checkpoint: expected params line");
  }
  if (n_params != ckpt.layout.total())
    throw FormatError("load_checkpoint: parameter count does not match layout");
  ckpt.params.resize(n_params);
  for (long i = 0; i < n_params; ++i) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4))
      throw FormatError("load_checkpoint: truncated parameter block");
    const uint32_t bits = static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
                          (static_cast<uint32_t>(bytes[2]) << 16) |
                          (static_cast<uint32_t>(bytes[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    ckpt.params[i] = static_cast<double>(f);
  }
  return ckpt;
}

namespace {

json stats_json(const std::optional<StandardizationStats>& stats) {
  if (!stats) return nullptr;
  return {{"mean", std::vector<double>(stats->mean.data(), stats->mean.data() + stats->mean.size())},
          {"stddev",
           std::vector<double>(stats->stddev.data(), stats->stddev.data() + stats->stddev.size())}};
}

std::optional<StandardizationStats> stats_from_json(const json& j) {
  if (!j.contains("standardization") || j["standardization"].is_null()) return std::nullopt;
  StandardizationStats st;
  auto mean = j["standardization"]["mean"].get<std::vector<double>>();
  auto sd = j["standardization"]["stddev"].get<std::vector<double>>();
  st.mean = Eigen::Map<const Vec>(mean.data(), static_cast<long>(mean.size()));
  st.stddev = Eigen::Map<const Vec>(sd.data(), static_cast<long>(sd.size()));
  return st;
}

}  // namespace

Checkpoint make_checkpoint(const NsModel& model, const Vec& params,
                           const std::optional<StandardizationStats>& stats) {
  Checkpoint ckpt;
  ckpt.family = NsModel::kFamily;
  ckpt.config = {{"family", NsModel::kFamily},
                 {"model", model.config().to_json()},
                 {"standardization", stats_json(stats)}};
  ckpt.layout = model.layout();
  ckpt.params = params;
  return ckpt;
}

Checkpoint make_checkpoint(const CfmModel& model, const Vec& params,
                           const std::optional<StandardizationStats>& stats) {
  Checkpoint ckpt;
  ckpt.family = CfmModel::kFamily;
  ckpt.config = {{"family", CfmModel::kFamily},
                 {"model", model.config().to_json()},
                 {"standardization", stats_json(stats)}};
  ckpt.layout = model.layout();
  ckpt.params = params;
  return ckpt;
}

Checkpoint make_checkpoint(const DdpmModel& model, const Vec& params,
                           const std::optional<StandardizationStats>& stats) {
  Checkpoint ckpt;
  ckpt.family = DdpmModel::kFamily;
  ckpt.config = {{"family", DdpmModel::kFamily},
                 {"model", model.config().to_json()},
                 {"standardization", stats_json(stats)}};
  ckpt.layout = model.layout();
  ckpt.params = params;
  return ckpt;
}

namespace {

std::variant<NsModel, CfmModel, DdpmModel> build_model(const std::string& family,
                                                       const json& config) {
  const json& mc = config.at("model");
  if (family == NsModel::kFamily) return NsModel(NsConfig::from_json(mc));
  if (family == CfmModel::kFamily) return CfmModel(CfmConfig::from_json(mc));
  if (family == DdpmModel::kFamily) return DdpmModel(DdpmConfig::from_json(mc));
  throw FormatError("unknown checkpoint family: " + family);
}

}  // namespace

AnyModel::AnyModel(const Checkpoint& ckpt)
    : family_(ckpt.family),
      model_(build_model(ckpt.family, ckpt.config)),
      params_(ckpt.params),
      stats_(stats_from_json(ckpt.config)) {
  long expected = 0;
  std::visit([&](const auto& m) { expected = m.param_count(); }, model_);
  require(expected == params_.size(), "AnyModel: parameter length does not match config");
}

int AnyModel::dim() const {
  return std::visit(
      [](const auto& m) {
        return m.config().d;
      },
      model_);
}

Mat AnyModel::sample(long n, uint64_t seed, int steps, bool pf_ode) const {
  Rng rng(seed);
  Mat raw;
  if (const NsModel* ns_m = std::get_if<NsModel>(&model_)) {
    raw = ns_m->sample(params_, n, rng);
  } else if (const CfmModel* cfm_m = std::get_if<CfmModel>(&model_)) {
    raw = cfm_m->sample(params_, n, rng, steps);
  } else {
    const DdpmModel& dd = std::get<DdpmModel>(model_);
    raw = pf_ode ? dd.pf_ode_sample(params_, n, steps > 0 ? steps : dd.config().T, rng)
                 : dd.sample(params_, n, rng);
  }
  if (stats_) raw = destandardize(raw, *stats_);
  return raw;
}

std::string AnyModel::sampler_tag(bool pf_ode) const {
  if (const CfmModel* m = std::get_if<CfmModel>(&model_)) {
    return ode_method_name(m->config().method) + "-" + std::to_string(m->config().ode_steps);
  }
  if (const DdpmModel* m = std::get_if<DdpmModel>(&model_)) {
    return pf_ode ? "pf-ode-" + std::to_string(m->config().T)
                  : "ancestral-" + std::to_string(m->config().T);
  }
  return "spline-inverse";
}

}  // namespace probgen
