#include "onepiece/tensor.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace onepiece {

namespace {

void to_little_endian(std::vector<std::uint32_t>& words) {
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = __builtin_bswap32(w);
  }
}

}  // namespace

void write_matrix(std::ostream& out, const MatF& m) {
  nlohmann::json header = {{"rows", m.rows()}, {"cols", m.cols()}};
  out << header.dump() << '\n';
  std::vector<std::uint32_t> words(static_cast<std::size_t>(m.size()));
  std::memcpy(words.data(), m.data(), words.size() * sizeof(float));
  to_little_endian(words);
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!out) throw FormatError("failed writing matrix payload");
}

MatF read_matrix(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing matrix header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad matrix header: ") + e.what());
  }
  if (!header.contains("rows") || !header.contains("cols"))
    throw FormatError("matrix header needs rows and cols");
  const auto rows = header["rows"].get<std::int64_t>();
  const auto cols = header["cols"].get<std::int64_t>();
  if (rows < 0 || cols < 0) throw FormatError("negative matrix shape");
  std::vector<std::uint32_t> words(static_cast<std::size_t>(rows * cols));
  in.read(reinterpret_cast<char*>(words.data()),
          static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (static_cast<std::size_t>(in.gcount()) != words.size() * sizeof(std::uint32_t))
    throw FormatError("truncated matrix payload");
  to_little_endian(words);
  MatF m(rows, cols);
  std::memcpy(m.data(), words.data(), words.size() * sizeof(float));
  return m;
}

void save_matrix(const std::filesystem::path& path, const MatF& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_matrix(out, m);
}

MatF load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_matrix(in);
}

}  // namespace onepiece
