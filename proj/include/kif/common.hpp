#ifndef KIF_COMMON_HPP
#define KIF_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace kif {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// All recoverable failures surface as kif::Error with a human-readable message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

using Rng = std::mt19937_64;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void check_finite(const Mat& m, const std::string& what) {
  if (!m.allFinite()) throw Error("non-finite values in " + what);
}

/// FNV-1a over bytes; used for stable record ids and stage content hashes.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 14695981039346656037ull);
std::uint64_t fnv1a(const std::string& s);

/// CRC-32 (IEEE polynomial) for artifact integrity checks.
std::uint32_t crc32(const void* data, std::size_t len);
std::uint32_t crc32(const std::string& s);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);

}  // namespace kif

#endif
