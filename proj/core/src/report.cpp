#include "seqdens/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "seqdens/error.hpp"
#include "seqdens/version.hpp"

namespace seqdens {

using nlohmann::json;

namespace {

json map_to_json(const std::map<int, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

std::map<int, double> map_from_json(const json& j) {
  std::map<int, double> m;
  for (auto it = j.begin(); it != j.end(); ++it)
    m[std::stoi(it.key())] = it.value().get<double>();
  return m;
}

}  // namespace

std::string ExperimentReport::serialize() const {
  json j;
  j["model_id"] = model_id;
  j["family"] = family;
  j["data_variant"] = data_variant;
  j["config_hash"] = config_hash;
  j["suite_version"] = suite_version.empty() ? kSuiteVersion : suite_version;
  j["test_ll"] = has_ll ? json(test_ll) : json(nullptr);
  j["test_ll_std_error"] = has_ll ? json(test_ll_std_error) : json(nullptr);
  j["test_bleu"] = has_bleu ? json(test_bleu) : json(nullptr);
  j["bleu_per_k"] = map_to_json(bleu_per_k);
  j["elbo_per_k"] = map_to_json(elbo_per_k);
  j["pairwise_bleu_per_k"] = map_to_json(pairwise_bleu_per_k);
  j["sentences_per_second"] =
      has_speed ? json(sentences_per_second) : json(nullptr);
  j["decoder_passes"] = decoder_passes;
  j["param_count"] = param_count;
  j["provenance"] = provenance;
  return j.dump(2);
}

ExperimentReport ExperimentReport::parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad report JSON: ") + e.what());
  }
  ExperimentReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.family = j.at("family").get<std::string>();
  r.data_variant = j.at("data_variant").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.suite_version = j.value("suite_version", std::string(kSuiteVersion));
  if (!j.at("test_ll").is_null()) {
    r.test_ll = j.at("test_ll").get<double>();
    r.has_ll = true;
    if (j.contains("test_ll_std_error") && !j.at("test_ll_std_error").is_null())
      r.test_ll_std_error = j.at("test_ll_std_error").get<double>();
  }
  if (!j.at("test_bleu").is_null()) {
    r.test_bleu = j.at("test_bleu").get<double>();
    r.has_bleu = true;
  }
  r.bleu_per_k = map_from_json(j.at("bleu_per_k"));
  r.elbo_per_k = map_from_json(j.at("elbo_per_k"));
  r.pairwise_bleu_per_k = map_from_json(j.at("pairwise_bleu_per_k"));
  if (!j.at("sentences_per_second").is_null()) {
    r.sentences_per_second = j.at("sentences_per_second").get<double>();
    r.has_speed = true;
  }
  r.decoder_passes = j.at("decoder_passes").get<long>();
  r.param_count = j.at("param_count").get<int64_t>();
  r.provenance =
      j.at("provenance").get<std::map<std::string, std::string>>();
  return r;
}

void ExperimentReport::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write report " + path);
  out << serialize() << "\n";
}

ExperimentReport ExperimentReport::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read report " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string format_correlation_grid(
    const std::vector<std::string>& columns,
    const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "";
  for (const auto& c : columns) os << std::right << std::setw(8) << c;
  os << "\n";
  for (const auto& [label, values] : rows) {
    os << std::left << std::setw(6) << label;
    for (double v : values)
      os << std::right << std::setw(8) << std::fixed << std::setprecision(3)
         << v;
    os << "\n";
  }
  return os.str();
}

namespace {

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

std::string format_results_table(const std::vector<ExperimentReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "model" << std::setw(10) << "variant"
     << std::right << std::setw(10) << "BLEU" << std::setw(10) << "LL"
     << std::setw(12) << "params" << "\n";
  for (const auto& r : reports) {
    os << std::left << std::setw(18) << r.model_id << std::setw(10)
       << r.data_variant << std::right << std::setw(10)
       << (r.has_bleu ? fmt(r.test_bleu) : "absent") << std::setw(10)
       << (r.has_ll ? fmt(r.test_ll, 3) : "absent") << std::setw(12)
       << r.param_count << "\n";
  }
  return os.str();
}

std::string format_refinement_table(
    const std::vector<ExperimentReport>& reports) {
  std::ostringstream os;
  std::vector<int> ks;
  for (const auto& r : reports)
    for (const auto& [k, v] : r.bleu_per_k)
      if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
  std::sort(ks.begin(), ks.end());
  os << std::left << std::setw(12) << "metric" << std::setw(18) << "model";
  for (int k : ks) os << std::right << std::setw(9) << ("k=" + std::to_string(k));
  os << "\n";
  for (const char* metric : {"BLEU", "ELBO"}) {
    for (const auto& r : reports) {
      const auto& m =
          std::string(metric) == "BLEU" ? r.bleu_per_k : r.elbo_per_k;
      if (m.empty()) continue;
      os << std::left << std::setw(12) << metric << std::setw(18) << r.model_id;
      for (int k : ks) {
        auto it = m.find(k);
        os << std::right << std::setw(9)
           << (it == m.end() ? std::string("-") : fmt(it->second));
      }
      os << "\n";
    }
  }
  return os.str();
}

std::string format_speed_table(const std::vector<ExperimentReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "model" << std::right << std::setw(10)
     << "BLEU" << std::setw(12) << "sent/s" << std::setw(12) << "passes"
     << std::setw(12) << "size" << "\n";
  for (const auto& r : reports) {
    os << std::left << std::setw(18) << r.model_id << std::right << std::setw(10)
       << (r.has_bleu ? fmt(r.test_bleu) : "absent") << std::setw(12)
       << (r.has_speed ? fmt(r.sentences_per_second) : "absent")
       << std::setw(12) << r.decoder_passes << std::setw(12) << r.param_count
       << "\n";
  }
  return os.str();
}

void write_scatter_data(const std::string& path,
                        const std::vector<ScatterPoint>& points,
                        const std::string& x_name, const std::string& y_name,
                        const std::string& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "# suite " << kSuiteVersion << "; " << provenance << "\n";
  out << x_name << "\t" << y_name << "\tlabel\tgroup\n";
  out.precision(12);
  for (const auto& p : points)
    out << p.x << "\t" << p.y << "\t" << p.label << "\t" << p.group << "\n";
}

void write_scatter_svg(const std::string& path,
                       const std::vector<ScatterPoint>& points,
                       const std::string& x_name, const std::string& y_name,
                       const std::string& title,
                       const std::string& provenance) {
  const double W = 640, H = 480, ml = 70, mr = 30, mt = 50, mb = 60;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  if (points.empty()) {
    xmin = ymin = 0;
    xmax = ymax = 1;
  }
  if (xmax - xmin < 1e-12) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (ymax - ymin < 1e-12) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  auto sx = [&](double x) {
    return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr);
  };
  auto sy = [&](double y) {
    return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb);
  };
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c",
                           "#9467bd", "#ff7f0e", "#8c564b"};
  std::vector<std::string> groups;
  auto color_of = [&](const std::string& g) {
    auto it = std::find(groups.begin(), groups.end(), g);
    if (it == groups.end()) {
      groups.push_back(g);
      it = groups.end() - 1;
    }
    return palette[(it - groups.begin()) % 6];
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<!-- suite " << kSuiteVersion << "; " << provenance << " -->\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-size=\"16\">" << title << "</text>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr
      << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  out << std::fixed;
  out.precision(2);
  out << "<text x=\"" << ml << "\" y=\"" << H - mb + 20
      << "\" font-size=\"11\">" << xmin << "</text>\n"
      << "<text x=\"" << W - mr - 30 << "\" y=\"" << H - mb + 20
      << "\" font-size=\"11\">" << xmax << "</text>\n"
      << "<text x=\"" << ml - 45 << "\" y=\"" << H - mb << "\" font-size=\"11\">"
      << ymin << "</text>\n"
      << "<text x=\"" << ml - 45 << "\" y=\"" << mt + 10
      << "\" font-size=\"11\">" << ymax << "</text>\n"
      << "<text x=\"" << (W + ml - mr) / 2 << "\" y=\"" << H - 15
      << "\" text-anchor=\"middle\" font-size=\"13\">" << x_name
      << "</text>\n"
      << "<text x=\"18\" y=\"" << (H + mt - mb) / 2
      << "\" font-size=\"13\" transform=\"rotate(-90 18 " << (H + mt - mb) / 2
      << ")\" text-anchor=\"middle\">" << y_name << "</text>\n";
  for (const auto& p : points) {
    out << "<circle cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y)
        << "\" r=\"4\" fill=\"" << color_of(p.group) << "\"><title>" << p.label
        << "</title></circle>\n";
    out << "<text x=\"" << sx(p.x) + 6 << "\" y=\"" << sy(p.y) - 4
        << "\" font-size=\"9\">" << p.label << "</text>\n";
  }
  double ly = mt;
  for (const auto& g : groups) {
    out << "<circle cx=\"" << W - mr - 110 << "\" cy=\"" << ly
        << "\" r=\"4\" fill=\"" << color_of(g) << "\"/>\n"
        << "<text x=\"" << W - mr - 100 << "\" y=\"" << ly + 4
        << "\" font-size=\"11\">" << g << "</text>\n";
    ly += 16;
  }
  out << "</svg>\n";
}

}  // namespace seqdens
