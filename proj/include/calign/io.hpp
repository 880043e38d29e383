#pragma once

// On-disk formats: score vectors, alignment matrices (JSON header plus a
// row-major f64 sidecar), loss traces, faithfulness curves and hashing.
// Doubles are written in shortest round-trip form so reruns are byte-stable.

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "calign/attribution.hpp"
#include "calign/dfa.hpp"
#include "calign/errors.hpp"
#include "calign/faithfulness.hpp"

namespace calign {

using json = nlohmann::ordered_json;

inline std::string format_double(double x) {
  if (!std::isfinite(x)) throw NumericError("format: non-finite value");
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline std::string hex(const unsigned char* p, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    s[2 * i] = digits[p[i] >> 4];
    s[2 * i + 1] = digits[p[i] & 15];
  }
  return s;
}

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw UsageError("sha256: digest failed");
  }
  return hex(md, len);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("missing artifact: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw MissingArtifactError("cannot write " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw MissingArtifactError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ------------------------------------------------------------ score vectors

struct ScoreMeta {
  std::size_t n_prompts = 0;
  std::uint64_t prompt_seed = 0;
  int ig_steps = 0;
};

inline json scores_to_json(const ScoreVector& s, const ScoreMeta& meta) {
  return json{{"model_id", s.model_id},
              {"task", to_string(s.task)},
              {"method", to_string(s.method)},
              {"node_order", kNodeOrder},
              {"n_prompts", meta.n_prompts},
              {"prompt_seed", meta.prompt_seed},
              {"ig_steps", meta.ig_steps},
              {"scores", s.scores}};
}

inline void save_scores(const std::filesystem::path& path, const ScoreVector& s, const ScoreMeta& meta) {
  write_file(path, dump(scores_to_json(s, meta)));
}

inline ScoreVector load_scores(const std::filesystem::path& path) {
  const json j = read_json(path);
  try {
    if (j.at("node_order").get<std::string>() != kNodeOrder) {
      throw MissingArtifactError("score file " + path.string() + " uses an unknown node order");
    }
    return ScoreVector{j.at("model_id").get<std::string>(), parse_task(j.at("task").get<std::string>()),
                       parse_method(j.at("method").get<std::string>()), j.at("scores").get<std::vector<double>>()};
  } catch (const json::exception& e) {
    throw MissingArtifactError("score file " + path.string() + " is malformed: " + e.what());
  }
}

// ------------------------------------------------------------ alignments

inline json train_config_json(const TrainConfig& c) {
  json tasks = json::array();
  for (TaskId t : c.tasks) tasks.push_back(to_string(t));
  return json{{"lambda", c.lambda},       {"lr", c.lr},
              {"steps", c.steps},         {"batch_size", c.batch_size},
              {"tasks", tasks},           {"seed", c.seed},
              {"pool_size", c.pool_size}, {"data_seed", c.data_seed},
              {"clean_source", to_string(c.clean_source)}};
}

inline std::string alignment_bytes(const AlignmentMatrix& a) {
  static_assert(std::endian::native == std::endian::little, "alignment sidecar assumes a little-endian host");
  return std::string(reinterpret_cast<const char*>(a.w.data()), a.w.size() * sizeof(double));
}

// Header for an alignment whose row-major data lives in the sidecar `data_file`.
inline std::string alignment_header(const AlignmentMatrix& a, const json& train_config, const std::string& data_file) {
  return dump(json{{"source_model_id", a.source_model_id},
                   {"target_model_id", a.target_model_id},
                   {"shape", {a.rows, a.cols}},
                   {"init_seed", a.init_seed},
                   {"trained", a.trained},
                   {"train_config", train_config},
                   {"standardization", kStandardization},
                   {"data", data_file},
                   {"data_sha256", sha256_hex(alignment_bytes(a))}});
}

// Writes <stem>.json and <stem>.bin.
inline void save_alignment(const std::filesystem::path& stem, const AlignmentMatrix& a, const json& train_config) {
  a.validate();
  auto bin = stem;
  bin += ".bin";
  auto hdr = stem;
  hdr += ".json";
  write_file(bin, alignment_bytes(a));
  write_file(hdr, alignment_header(a, train_config, bin.filename().string()));
}

inline AlignmentMatrix load_alignment(const std::filesystem::path& header) {
  const json j = read_json(header);
  AlignmentMatrix a;
  try {
    if (j.at("standardization").get<std::string>() != kStandardization) {
      throw MissingArtifactError("alignment " + header.string() + " uses an unknown standardization");
    }
    a.source_model_id = j.at("source_model_id").get<std::string>();
    a.target_model_id = j.at("target_model_id").get<std::string>();
    a.rows = j.at("shape").at(0).get<std::size_t>();
    a.cols = j.at("shape").at(1).get<std::size_t>();
    a.init_seed = j.at("init_seed").get<std::uint64_t>();
    a.trained = j.at("trained").get<bool>();
    const std::string bytes = read_file(header.parent_path() / j.at("data").get<std::string>());
    if (sha256_hex(bytes) != j.at("data_sha256").get<std::string>()) {
      throw MissingArtifactError("alignment data for " + header.string() + " fails its checksum");
    }
    if (bytes.size() != a.rows * a.cols * sizeof(double)) {
      throw MissingArtifactError("alignment data for " + header.string() + " has the wrong length");
    }
    a.w.resize(a.rows * a.cols);
    std::memcpy(a.w.data(), bytes.data(), bytes.size());
  } catch (const json::exception& e) {
    throw MissingArtifactError("alignment header " + header.string() + " is malformed: " + e.what());
  }
  a.validate();
  return a;
}

inline std::string loss_trace_csv(std::span<const LossRow> trace) {
  std::string out = "step,kl,sparsity,total\n";
  for (const LossRow& r : trace) {
    out += std::to_string(r.step) + "," + format_double(r.kl) + "," + format_double(r.sparsity) + "," +
           format_double(r.total) + "\n";
  }
  return out;
}

// ------------------------------------------------------------ curves

inline std::string curve_csv(const FaithfulnessCurve& c) {
  std::string out = "k,f\n";
  for (std::size_t i = 0; i < c.f.size(); ++i) out += format_double(c.grid.ks[i]) + "," + format_double(c.f[i]) + "\n";
  out += "# cpr=" + format_double(c.cpr) + "\n# k_grid=" + c.grid.id + "\n";
  return out;
}

inline FaithfulnessCurve parse_curve_csv(std::string_view text) {
  FaithfulnessCurve c;
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line) || line != "k,f") throw MissingArtifactError("curve CSV: missing 'k,f' header");
  bool have_cpr = false;
  while (std::getline(is, line)) {
    if (line.rfind("# cpr=", 0) == 0) {
      c.cpr = std::stod(line.substr(6));
      have_cpr = true;
    } else if (line.rfind("# k_grid=", 0) == 0) {
      c.grid.id = line.substr(9);
    } else {
      const auto comma = line.find(',');
      if (comma == std::string::npos) throw MissingArtifactError("curve CSV: malformed row '" + line + "'");
      c.grid.ks.push_back(std::stod(line.substr(0, comma)));
      c.f.push_back(std::stod(line.substr(comma + 1)));
    }
  }
  if (!have_cpr || c.grid.id.empty()) throw MissingArtifactError("curve CSV: missing cpr or k_grid footer");
  return c;
}

}  // namespace calign
