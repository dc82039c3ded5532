#include "kif/capsule.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ctime>
#include <sstream>

using nlohmann::json;

namespace kif {

void Capsule::set_target_layers(std::vector<int> layers) {
  require(!layers.empty(), "capsule: no target layers");
  layers_ = std::move(layers);
}

void Capsule::validate() const {
  require(!layers_.empty(), "capsule: no target layers");
  require(d.size() > 0, "capsule: empty direction");
  require(d.allFinite(), "capsule: non-finite direction");
  require(std::abs(d.norm() - 1.0) < 1e-6, "capsule: direction not unit norm");
  require(tau > 0 && k > 0, "capsule: tau and k must be positive");
  require(calib_std > 0, "capsule: calib_std must be positive");
}

void Capsule::apply(Mat& y, double& peak_z) const {
  require(y.cols() == d.size(), "capsule: hidden size mismatch");
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    double p = y.row(t).dot(d);
    double z = (p - calib_mean) / calib_std;
    peak_z = std::max(peak_z, z);
    double a_eff = gated ? alpha / (1.0 + std::exp(-k * (z - tau))) : alpha;
    y.row(t) += a_eff * p * d.transpose();
  }
}

Vec Capsule::apply_vec(const Vec& h) const {
  Mat y = h.transpose();
  double z = -std::numeric_limits<double>::infinity();
  apply(y, z);
  return y.transpose();
}

Vec align_signature(const Vec& direction, int d_hidden, StandardizeMode mode) {
  require(direction.size() > 0, "align_signature: empty direction");
  Vec clean = direction;
  for (Eigen::Index i = 0; i < clean.size(); ++i) {
    double v = clean(i);
    if (std::isnan(v))
      clean(i) = 0.0;
    else if (std::isinf(v))
      clean(i) = v > 0 ? 1.0 : -1.0;
  }
  Vec fitted = standardize_dim(clean, d_hidden, mode);
  double norm = fitted.norm();
  require(norm > 1e-12, "align_signature: direction vanished after sanitization");
  return fitted / norm;
}

std::vector<Capsule> forge_capsules(const std::map<std::string, Signature>& signatures,
                                    const std::vector<ValidationRow>& validation,
                                    const std::string& subject, int d_hidden, int top_k,
                                    double tau, double k, StandardizeMode align_mode) {
  require(top_k >= 1, "forge_capsules: top_k must be >= 1");
  std::vector<ValidationRow> ranked = validation;
  std::sort(ranked.begin(), ranked.end(), [](const ValidationRow& a, const ValidationRow& b) {
    if (a.metrics.auc_roc != b.metrics.auc_roc) return a.metrics.auc_roc > b.metrics.auc_roc;
    return a.effect_size > b.effect_size;
  });

  std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));

  std::vector<Capsule> out;
  std::set<int> used_layers;
  for (const ValidationRow& row : ranked) {
    if (static_cast<int>(out.size()) >= top_k) break;
    if (used_layers.count(row.layer)) continue;  // one capsule per layer
    auto it = signatures.find(row.key);
    require(it != signatures.end(), "forge_capsules: missing signature for " + row.key);
    const Signature& sig = it->second;

    Capsule c;
    c.subject = subject;
    c.set_target_layers({row.layer});
    c.d = align_signature(sig.direction, d_hidden, align_mode);
    c.tau = tau;
    c.k = k;
    // rescale calibration to the aligned direction: projections of the mined
    // activations change by the cosine between original and aligned directions
    // only when dimensions differ, where the dropped/padded mass is ~0, so we
    // carry the mined stats over directly
    c.calib_mean = sig.calib_mean;
    c.calib_std = sig.calib_std;
    c.align_mode = align_mode;
    c.effect_size = sig.effect.point_estimate;
    c.source_signature = row.key;
    c.created_at = stamp;
    c.validate();
    used_layers.insert(row.layer);
    out.push_back(std::move(c));
  }
  require(!out.empty(), "forge_capsules: no layer passed forging");
  return out;
}

namespace {
constexpr char kMagic[] = "KIFCAPS1\n";
}

void save_capsule(const Capsule& c, const std::string& path) {
  c.validate();
  json header{{"version", 1},
              {"subject", c.subject},
              {"layers", c.target_layers()},
              {"gated", c.gated},
              {"align_mode", to_string(c.align_mode)},
              {"source_signature", c.source_signature},
              {"created_at", c.created_at},
              {"dim", c.d.size()}};
  std::string body = header.dump();
  body += '\n';
  // scalar doubles travel in the binary payload so the round trip is bit-exact
  double scalars[6] = {c.alpha, c.tau, c.k, c.calib_mean, c.calib_std, c.effect_size};
  body.append(reinterpret_cast<const char*>(scalars), sizeof(scalars));
  body.append(reinterpret_cast<const char*>(c.d.data()),
              sizeof(double) * static_cast<std::size_t>(c.d.size()));
  std::string out = kMagic;
  out += body;
  std::uint32_t crc = crc32(body);
  out.append(reinterpret_cast<const char*>(&crc), 4);
  write_file(path, out);
}

Capsule load_capsule(const std::string& path) {
  std::string raw = read_file(path);
  const std::size_t magic_len = std::strlen(kMagic);
  if (raw.size() < magic_len + 4 || raw.compare(0, magic_len, kMagic) != 0)
    throw Error("not a capsule file: " + path);
  std::string body = raw.substr(magic_len, raw.size() - magic_len - 4);
  std::uint32_t stored;
  std::memcpy(&stored, raw.data() + raw.size() - 4, 4);
  if (crc32(body) != stored) throw Error("capsule checksum mismatch in " + path);

  std::size_t nl = body.find('\n');
  if (nl == std::string::npos) throw Error("capsule header missing in " + path);
  json header = json::parse(body.substr(0, nl));
  if (header.at("version").get<int>() != 1)
    throw Error("unsupported capsule version in " + path);

  Capsule c;
  c.subject = header.at("subject").get<std::string>();
  c.set_target_layers(header.at("layers").get<std::vector<int>>());
  c.gated = header.at("gated").get<bool>();
  c.align_mode = standardize_mode_from_string(header.at("align_mode").get<std::string>());
  c.source_signature = header.at("source_signature").get<std::string>();
  c.created_at = header.at("created_at").get<std::string>();
  auto dim = header.at("dim").get<Eigen::Index>();

  std::size_t pos = nl + 1;
  std::size_t need = 6 * sizeof(double) + sizeof(double) * static_cast<std::size_t>(dim);
  if (body.size() - pos != need) throw Error("capsule payload size mismatch in " + path);
  double scalars[6];
  std::memcpy(scalars, body.data() + pos, sizeof(scalars));
  pos += sizeof(scalars);
  c.alpha = scalars[0];
  c.tau = scalars[1];
  c.k = scalars[2];
  c.calib_mean = scalars[3];
  c.calib_std = scalars[4];
  c.effect_size = scalars[5];
  c.d.resize(dim);
  std::memcpy(c.d.data(), body.data() + pos, sizeof(double) * static_cast<std::size_t>(dim));
  for (Eigen::Index i = 0; i < c.d.size(); ++i) {
    double v = c.d(i);
    if (std::isnan(v))
      c.d(i) = 0.0;
    else if (std::isinf(v))
      c.d(i) = v > 0 ? 1.0 : -1.0;
  }
  double norm = c.d.norm();
  require(norm > 1e-12, "capsule direction vanished after sanitization: " + path);
  c.d /= norm;
  c.validate();
  return c;
}

std::string capsule_summary(const Capsule& c) {
  std::ostringstream os;
  os << "Capsule: " << c.subject << "\n";
  os << "  Target Layers   ";
  for (std::size_t i = 0; i < c.target_layers().size(); ++i)
    os << (i ? "," : "") << c.target_layers()[i];
  os << "\n";
  char line[128];
  std::snprintf(line, sizeof(line), "  Effect Size     %.4f\n", c.effect_size);
  os << line;
  std::snprintf(line, sizeof(line), "  Dims            (%lld,)\n",
                static_cast<long long>(c.d.size()));
  os << line;
  std::snprintf(line, sizeof(line), "  Min/Max/Mean    %.4f / %.4f / %.4f\n", c.d.minCoeff(),
                c.d.maxCoeff(), c.d.mean());
  os << line;
  os << "  First 5         [";
  for (Eigen::Index i = 0; i < std::min<Eigen::Index>(5, c.d.size()); ++i) {
    std::snprintf(line, sizeof(line), "%s%.4f", i ? ", " : "", c.d(i));
    os << line;
  }
  os << "]\n";
  std::snprintf(line, sizeof(line), "  alpha=%.4f tau=%.2f k=%.2f\n", c.alpha, c.tau, c.k);
  os << line;
  return os.str();
}

}  // namespace kif
