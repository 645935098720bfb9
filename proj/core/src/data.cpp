#include "seqdens/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "seqdens/error.hpp"

namespace fs = std::filesystem;

namespace seqdens {

Vocab::Vocab() {
  add("<pad>");
  add("<bos>");
  add("<eos>");
}

int64_t Vocab::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  const int64_t id = size();
  id_to_token_.push_back(token);
  token_to_id_[token] = id;
  return id;
}

int64_t Vocab::to_id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) throw DataError("unknown token: " + token);
  return it->second;
}

const std::string& Vocab::to_token(int64_t id) const {
  if (id < 0 || id >= size())
    throw IndexError("token id " + std::to_string(id) + " out of vocab");
  return id_to_token_[static_cast<size_t>(id)];
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& t : id_to_token_) out << t << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  Vocab v;
  std::string line;
  int64_t idx = 0;
  while (std::getline(in, line)) {
    if (idx >= kReservedTokens) v.add(line);
    ++idx;
  }
  return v;
}

void TaskSpec::validate() const {
  if (kind != "copy" && kind != "reverse" && kind != "synonym")
    throw ConfigError("unknown task kind: " + kind);
  if (min_len < 1 || max_len > 64 || min_len > max_len)
    throw ConfigError("task length range must satisfy 1 <= min <= max <= 64");
  if (vocab_size < kReservedTokens + 2) throw ConfigError("vocab_size too small");
  if (kind == "synonym") {
    if (synonym_fanout < 1) throw ConfigError("synonym_fanout must be >= 1");
    const int64_t usable = vocab_size - kReservedTokens;
    if (usable / (1 + synonym_fanout) < 1)
      throw ConfigError("vocab too small for the synonym layout");
  }
  if (n_train < 0 || n_dev < 0 || n_test < 0) throw ConfigError("negative split size");
}

SynonymTable SynonymTable::build(const TaskSpec& spec) {
  SynonymTable t;
  t.fanout = std::max(1, spec.synonym_fanout);
  const int64_t usable = spec.vocab_size - kReservedTokens;
  t.concepts = usable / (1 + t.fanout);
  if (t.concepts < 1) throw ConfigError("vocab too small for synonym table");
  return t;
}

namespace {

std::vector<int64_t> sample_source(const TaskSpec& spec, const SynonymTable& table,
                                   Rng& rng) {
  const int64_t len =
      spec.min_len + static_cast<int64_t>(rng.uniform_int(
                         static_cast<uint64_t>(spec.max_len - spec.min_len + 1)));
  std::vector<int64_t> src(static_cast<size_t>(len));
  if (spec.kind == "synonym") {
    for (auto& s : src)
      s = table.source_id(static_cast<int64_t>(
          rng.uniform_int(static_cast<uint64_t>(table.concepts))));
  } else {
    const int64_t usable = spec.vocab_size - kReservedTokens;
    for (auto& s : src)
      s = kReservedTokens +
          static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(usable)));
  }
  return src;
}

void pad_target(SequencePair* pair) {
  pair->raw_target_len = static_cast<int64_t>(pair->target.size());
  const int64_t padded = pad_to_multiple_of_4(pair->raw_target_len);
  while (static_cast<int64_t>(pair->target.size()) < padded)
    pair->target.push_back(kEosId);
}

// All m^len synonym combinations for a source row, in lexicographic choice
// order. Only called when the count is at or below the reference cap.
std::vector<std::vector<int64_t>> enumerate_references(
    const SynonymTable& table, const std::vector<int64_t>& src) {
  std::vector<std::vector<int64_t>> refs;
  std::vector<int> choice(src.size(), 0);
  while (true) {
    std::vector<int64_t> ref(src.size());
    for (size_t i = 0; i < src.size(); ++i)
      ref[i] = table.target_id(table.concept_of_source(src[i]), choice[i]);
    refs.push_back(std::move(ref));
    int pos = static_cast<int>(src.size()) - 1;
    while (pos >= 0) {
      if (++choice[pos] < table.fanout) break;
      choice[pos] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  return refs;
}

double pow_capped(double base, int64_t e, double cap) {
  double v = 1;
  for (int64_t i = 0; i < e; ++i) {
    v *= base;
    if (v > cap) return cap + 1;
  }
  return v;
}

}  // namespace

std::vector<int64_t> sample_task_target(const TaskSpec& spec,
                                        const SynonymTable& table,
                                        const std::vector<int64_t>& src,
                                        Rng& rng) {
  std::vector<int64_t> tgt;
  tgt.reserve(src.size());
  if (spec.kind == "copy") {
    tgt = src;
  } else if (spec.kind == "reverse") {
    tgt.assign(src.rbegin(), src.rend());
  } else {
    for (int64_t s : src)
      tgt.push_back(table.target_id(table.concept_of_source(s),
                                    static_cast<int>(rng.uniform_int(
                                        static_cast<uint64_t>(table.fanout)))));
  }
  return tgt;
}

Dataset generate_dataset(const TaskSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  SynonymTable table = (spec.kind == "synonym") ? SynonymTable::build(spec)
                                                : SynonymTable{};
  // Vocabulary: generic word tokens for copy/reverse, concept/synonym
  // tokens for the synonym task. Reserved ids come from the Vocab ctor.
  if (spec.kind == "synonym") {
    for (int64_t c = 0; c < table.concepts; ++c)
      ds.vocab.add("s" + std::to_string(c));
    for (int64_t c = 0; c < table.concepts; ++c)
      for (int j = 0; j < table.fanout; ++j)
        ds.vocab.add("t" + std::to_string(c) + "_" + std::to_string(j));
  } else {
    for (int64_t i = kReservedTokens; i < spec.vocab_size; ++i)
      ds.vocab.add("w" + std::to_string(i - kReservedTokens));
  }

  Rng rng(spec.seed);
  auto make_split = [&](int64_t n, bool with_refs) {
    std::vector<SequencePair> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      SequencePair pair;
      pair.source = sample_source(spec, table, rng);
      pair.target = sample_task_target(spec, table, pair.source, rng);
      std::vector<int64_t> raw_target = pair.target;
      pad_target(&pair);
      if (with_refs) {
        if (spec.kind == "synonym") {
          const int64_t len = static_cast<int64_t>(pair.source.size());
          if (pow_capped(table.fanout, len,
                         static_cast<double>(spec.reference_cap)) <=
              static_cast<double>(spec.reference_cap)) {
            pair.references = enumerate_references(table, pair.source);
          } else {
            pair.references.push_back(raw_target);
            for (int r = 1; r < table.fanout; ++r)
              pair.references.push_back(
                  sample_task_target(spec, table, pair.source, rng));
          }
        } else {
          pair.references.push_back(raw_target);
        }
      }
      out.push_back(std::move(pair));
    }
    return out;
  };
  ds.train = make_split(spec.n_train, false);
  ds.dev = make_split(spec.n_dev, false);
  ds.test = make_split(spec.n_test, true);
  return ds;
}

std::vector<SequencePair> preprocess(std::vector<SequencePair> pairs,
                                     int64_t max_len) {
  std::vector<SequencePair> out;
  for (auto& p : pairs) {
    const int64_t raw = p.raw_target_len > 0
                            ? p.raw_target_len
                            : static_cast<int64_t>(p.target.size());
    if (static_cast<int64_t>(p.source.size()) > max_len || raw > max_len) continue;
    p.target.resize(static_cast<size_t>(raw));
    pad_target(&p);
    out.push_back(std::move(p));
  }
  if (out.empty()) throw DataError("preprocessing left an empty dataset");
  return out;
}

double true_conditional_entropy(const TaskSpec& spec, int64_t len) {
  if (spec.kind != "synonym") return 0.0;
  return static_cast<double>(len) * std::log(static_cast<double>(spec.synonym_fanout));
}

std::vector<std::vector<size_t>> epoch_batches(
    const std::vector<SequencePair>& split, int64_t batch_size, uint64_t seed,
    int64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::map<std::pair<int64_t, int64_t>, std::vector<size_t>> buckets;
  for (size_t i = 0; i < split.size(); ++i)
    buckets[{static_cast<int64_t>(split[i].source.size()),
             split[i].padded_target_len()}]
        .push_back(i);
  Rng rng(seed ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(epoch + 1)));
  std::vector<std::vector<size_t>> batches;
  for (auto& [key, idx] : buckets) {
    shuffle(idx, rng);
    for (size_t start = 0; start < idx.size(); start += batch_size)
      batches.emplace_back(idx.begin() + start,
                           idx.begin() + std::min(idx.size(),
                                                  start + batch_size));
  }
  shuffle(batches, rng);
  return batches;
}

double aligned_conditional_entropy(const std::vector<SequencePair>& pairs) {
  std::map<int64_t, std::map<int64_t, int64_t>> counts;
  std::map<int64_t, int64_t> totals;
  for (const auto& p : pairs) {
    const size_t n = std::min(p.source.size(),
                              static_cast<size_t>(p.raw_target_len));
    for (size_t i = 0; i < n; ++i) {
      counts[p.source[i]][p.target[i]] += 1;
      totals[p.source[i]] += 1;
    }
  }
  int64_t grand = 0;
  for (auto& [s, n] : totals) grand += n;
  if (grand == 0) return 0.0;
  double h = 0;
  for (auto& [s, dist] : counts) {
    const double ps = static_cast<double>(totals[s]) / static_cast<double>(grand);
    double hs = 0;
    for (auto& [t, c] : dist) {
      const double pt = static_cast<double>(c) / static_cast<double>(totals[s]);
      hs -= pt * std::log(pt);
    }
    h += ps * hs;
  }
  return h;
}

TokenRows batch_sources(const std::vector<SequencePair>& split,
                        const std::vector<size_t>& idx) {
  TokenRows rows;
  rows.reserve(idx.size());
  for (size_t i : idx) rows.push_back(split[i].source);
  return rows;
}

TokenRows batch_targets(const std::vector<SequencePair>& split,
                        const std::vector<size_t>& idx) {
  TokenRows rows;
  rows.reserve(idx.size());
  for (size_t i : idx) rows.push_back(split[i].target);
  return rows;
}

// ---------------------------------------------------------------------------
// On-disk layout (documented in docs/FORMATS.md):
//   task.json     spec + provenance
//   vocab.txt     one token per line
//   {split}.tsv   token strings, TAB between source and padded target
//   {split}.bin   id cache: "SDIC", u32 n, per pair u32 slen/raw/plen + ids
//   test.refs.txt reference blocks per test source

namespace {

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError("truncated id cache");
  return v;
}

std::string row_to_text(const Vocab& vocab, const std::vector<int64_t>& ids) {
  std::ostringstream os;
  for (size_t i = 0; i < ids.size(); ++i)
    os << (i ? " " : "") << vocab.to_token(ids[i]);
  return os.str();
}

std::vector<int64_t> text_to_row(const Vocab& vocab, const std::string& text) {
  std::vector<int64_t> ids;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) ids.push_back(vocab.to_id(tok));
  return ids;
}

void save_split_text(const std::string& path, const Vocab& vocab,
                     const std::vector<SequencePair>& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& p : split)
    out << row_to_text(vocab, p.source) << "\t" << row_to_text(vocab, p.target)
        << "\n";
}

void save_split_bin(const std::string& path,
                    const std::vector<SequencePair>& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write("SDIC", 4);
  write_u32(out, static_cast<uint32_t>(split.size()));
  for (const auto& p : split) {
    write_u32(out, static_cast<uint32_t>(p.source.size()));
    write_u32(out, static_cast<uint32_t>(p.raw_target_len));
    write_u32(out, static_cast<uint32_t>(p.target.size()));
    for (int64_t s : p.source) write_u32(out, static_cast<uint32_t>(s));
    for (int64_t t : p.target) write_u32(out, static_cast<uint32_t>(t));
  }
}

std::vector<SequencePair> load_split_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::strncmp(magic, "SDIC", 4) != 0)
    throw DataError("bad id cache magic in " + path);
  const uint32_t n = read_u32(in);
  std::vector<SequencePair> split(n);
  for (auto& p : split) {
    const uint32_t slen = read_u32(in);
    const uint32_t raw = read_u32(in);
    const uint32_t plen = read_u32(in);
    p.raw_target_len = raw;
    p.source.resize(slen);
    for (auto& s : p.source) s = read_u32(in);
    p.target.resize(plen);
    for (auto& t : p.target) t = read_u32(in);
  }
  return split;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir,
                  const std::string& config_hash) {
  fs::create_directories(dir);
  ds.vocab.save(dir + "/vocab.txt");
  {
    nlohmann::json j;
    j["kind"] = ds.spec.kind;
    j["vocab_size"] = ds.spec.vocab_size;
    j["min_len"] = ds.spec.min_len;
    j["max_len"] = ds.spec.max_len;
    j["synonym_fanout"] = ds.spec.synonym_fanout;
    j["reference_cap"] = ds.spec.reference_cap;
    j["seed"] = ds.spec.seed;
    j["n_train"] = ds.spec.n_train;
    j["n_dev"] = ds.spec.n_dev;
    j["n_test"] = ds.spec.n_test;
    j["config_hash"] = config_hash;
    std::ofstream out(dir + "/task.json", std::ios::binary);
    if (!out) throw DataError("cannot write task.json");
    out << j.dump(2) << "\n";
  }
  save_split_text(dir + "/train.tsv", ds.vocab, ds.train);
  save_split_text(dir + "/dev.tsv", ds.vocab, ds.dev);
  save_split_text(dir + "/test.tsv", ds.vocab, ds.test);
  save_split_bin(dir + "/train.bin", ds.train);
  save_split_bin(dir + "/dev.bin", ds.dev);
  save_split_bin(dir + "/test.bin", ds.test);
  {
    std::ofstream out(dir + "/test.refs.txt", std::ios::binary);
    if (!out) throw DataError("cannot write test.refs.txt");
    for (size_t i = 0; i < ds.test.size(); ++i) {
      out << "#" << i << "\t" << ds.test[i].references.size() << "\n";
      for (const auto& r : ds.test[i].references)
        out << row_to_text(ds.vocab, r) << "\n";
      out << "\n";
    }
  }
}

std::string dataset_task_hash(const std::string& dir) {
  std::ifstream in(dir + "/task.json", std::ios::binary);
  if (!in) throw DataError("cannot read " + dir + "/task.json");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad task.json: " + std::string(e.what()));
  }
  return j.at("config_hash").get<std::string>();
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.vocab = Vocab::load(dir + "/vocab.txt");
  {
    std::ifstream in(dir + "/task.json", std::ios::binary);
    if (!in) throw DataError("cannot read " + dir + "/task.json");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad task.json: " + std::string(e.what()));
    }
    ds.spec.kind = j.at("kind").get<std::string>();
    ds.spec.vocab_size = j.at("vocab_size").get<int64_t>();
    ds.spec.min_len = j.at("min_len").get<int64_t>();
    ds.spec.max_len = j.at("max_len").get<int64_t>();
    ds.spec.synonym_fanout = j.at("synonym_fanout").get<int>();
    ds.spec.reference_cap = j.at("reference_cap").get<int64_t>();
    ds.spec.seed = j.at("seed").get<uint64_t>();
    ds.spec.n_train = j.at("n_train").get<int64_t>();
    ds.spec.n_dev = j.at("n_dev").get<int64_t>();
    ds.spec.n_test = j.at("n_test").get<int64_t>();
  }
  ds.train = load_split_bin(dir + "/train.bin");
  ds.dev = load_split_bin(dir + "/dev.bin");
  ds.test = load_split_bin(dir + "/test.bin");
  // references
  std::ifstream in(dir + "/test.refs.txt", std::ios::binary);
  if (in) {
    std::string line;
    size_t idx = 0;
    int64_t remaining = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line[0] == '#') {
        std::istringstream is(line.substr(1));
        is >> idx;
        std::string count_str;
        is >> count_str;
        remaining = std::stoll(count_str);
        continue;
      }
      if (remaining > 0 && idx < ds.test.size()) {
        ds.test[idx].references.push_back(text_to_row(ds.vocab, line));
        --remaining;
      }
    }
  }
  return ds;
}

}  // namespace seqdens
