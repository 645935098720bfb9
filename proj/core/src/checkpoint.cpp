#include "seqdens/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "seqdens/error.hpp"
#include "seqdens/version.hpp"

namespace seqdens {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'D', 'C', 'K', 'P', 'T', '1', '\n'};

void write_doubles(std::ofstream& out, const double* data, size_t n) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::ifstream& in, double* data, size_t n) {
  in.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint payload");
}

}  // namespace

void save_checkpoint(const std::string& path, const ExperimentConfig& config,
                     const DensityEstimator& model, int64_t step,
                     double dev_ll, double dev_bleu,
                     const OptimizerSnapshot* opt,
                     const std::array<uint64_t, 4>* rng_state) {
  json header;
  header["suite_version"] = kSuiteVersion;
  header["config"] = json::parse(config.serialize());
  header["config_hash"] = config.hash();
  header["task_hash"] = config.task_hash();
  header["family"] = model.family();
  header["step"] = step;
  header["dev_ll"] = dev_ll;
  header["dev_bleu"] = dev_bleu;
  json params = json::array();
  for (const auto& [name, t] : model.params().items()) {
    json p;
    p["name"] = name;
    p["shape"] = t.shape();
    params.push_back(p);
  }
  header["params"] = params;
  if (const auto* lvm = dynamic_cast<const LvmModel*>(&model)) {
    if (lvm->prior_kind() == PriorKind::flow) {
      header["flow"] = {
          {"depths", lvm->config().flow_depths},
          {"heads", lvm->config().flow_heads},
          {"actnorm_initialized", lvm->prior().flow.actnorm_initialized()}};
    }
  }
  header["has_optimizer"] = (opt != nullptr);
  if (opt) header["optimizer_step"] = opt->step_count;
  header["has_rng"] = (rng_state != nullptr);
  if (rng_state)
    header["rng_state"] = std::vector<uint64_t>(rng_state->begin(),
                                                rng_state->end());
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  const uint64_t hlen = header_text.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_text.data(), static_cast<std::streamsize>(hlen));
  for (const auto& [name, t] : model.params().items())
    write_doubles(out, t.data().data(), t.data().size());
  if (opt) {
    write_doubles(out, opt->first_moment.data(), opt->first_moment.size());
    write_doubles(out, opt->second_moment.data(), opt->second_moment.size());
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("bad checkpoint magic in " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_text(hlen, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated checkpoint header");
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }

  LoadedCheckpoint ck;
  ck.config = ExperimentConfig::parse(header.at("config").dump());
  if (ck.config.hash() != header.at("config_hash").get<std::string>())
    throw ConfigError("checkpoint config hash mismatch in " + path);
  ck.model = build_model(ck.config);
  ck.step = header.at("step").get<int64_t>();
  ck.dev_ll = header.at("dev_ll").get<double>();
  ck.dev_bleu = header.at("dev_bleu").get<double>();

  // parameter layout must match the freshly built model exactly
  const auto& params_meta = header.at("params");
  const auto& items = ck.model->params().items();
  if (params_meta.size() != items.size())
    throw DataError("checkpoint parameter count mismatch");
  for (size_t i = 0; i < items.size(); ++i) {
    if (params_meta[i].at("name").get<std::string>() != items[i].first)
      throw DataError("checkpoint parameter order mismatch at " +
                      items[i].first);
    Tensor t = items[i].second;
    read_doubles(in, t.raw().data(), t.raw().size());
  }
  if (auto* lvm = dynamic_cast<LvmModel*>(ck.model.get())) {
    if (lvm->prior_kind() == PriorKind::flow && header.contains("flow"))
      lvm->prior().flow.set_actnorm_initialized(
          header.at("flow").at("actnorm_initialized").get<bool>());
  }
  if (header.value("has_optimizer", false)) {
    OptimizerSnapshot opt;
    opt.step_count = header.at("optimizer_step").get<int64_t>();
    const size_t n = static_cast<size_t>(ck.model->params().total_size());
    opt.first_moment.resize(n);
    opt.second_moment.resize(n);
    read_doubles(in, opt.first_moment.data(), n);
    read_doubles(in, opt.second_moment.data(), n);
    ck.optimizer = std::move(opt);
  }
  if (header.value("has_rng", false)) {
    auto words = header.at("rng_state").get<std::vector<uint64_t>>();
    if (words.size() != 4) throw DataError("bad rng state in checkpoint");
    std::array<uint64_t, 4> st;
    std::copy(words.begin(), words.end(), st.begin());
    ck.rng_state = st;
  }
  return ck;
}

}  // namespace seqdens
