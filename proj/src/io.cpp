#include "soiltdm/io.hpp"

#include <cstdio>
#include <sstream>

#include "soiltdm/errors.hpp"

namespace soiltdm {

namespace {
constexpr char kCheckpointMagic[5] = "STCK";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

BinaryWriter::BinaryWriter(const std::string& path)
    : out_(path, std::ios::binary) {
  if (!out_) throw ConfigError("cannot open for writing: " + path);
}

void BinaryWriter::u8(std::uint8_t v) {
  out_.write(reinterpret_cast<const char*>(&v), 1);
}
void BinaryWriter::u32(std::uint32_t v) {
  out_.write(reinterpret_cast<const char*>(&v), 4);
}
void BinaryWriter::f64(double v) {
  out_.write(reinterpret_cast<const char*>(&v), 8);
}
void BinaryWriter::f64_array(const double* data, std::size_t n) {
  out_.write(reinterpret_cast<const char*>(data),
             static_cast<std::streamsize>(n * sizeof(double)));
}
void BinaryWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

BinaryReader::BinaryReader(const std::string& path)
    : in_(path, std::ios::binary) {
  if (!in_) throw ConfigError("cannot open for reading: " + path);
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v = 0;
  in_.read(reinterpret_cast<char*>(&v), 1);
  if (!in_) throw ConfigError("unexpected end of file");
  return v;
}
std::uint32_t BinaryReader::u32() {
  std::uint32_t v = 0;
  in_.read(reinterpret_cast<char*>(&v), 4);
  if (!in_) throw ConfigError("unexpected end of file");
  return v;
}
double BinaryReader::f64() {
  double v = 0;
  in_.read(reinterpret_cast<char*>(&v), 8);
  if (!in_) throw ConfigError("unexpected end of file");
  return v;
}
void BinaryReader::f64_array(double* data, std::size_t n) {
  in_.read(reinterpret_cast<char*>(data),
           static_cast<std::streamsize>(n * sizeof(double)));
  if (!in_) throw ConfigError("unexpected end of file");
}
std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  std::string s(n, '\0');
  in_.read(s.data(), n);
  if (!in_) throw ConfigError("unexpected end of file");
  return s;
}

const Eigen::VectorXd& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, v] : arrays) {
    if (n == name) return v;
  }
  throw ConfigError("checkpoint array not found: " + name);
}

void Checkpoint::save(const std::string& path) const {
  nlohmann::json header = meta;
  header["format_version"] = kCheckpointVersion;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, v] : arrays) {
    arr.push_back({{"name", name}, {"len", v.size()}});
  }
  header["arrays"] = arr;

  BinaryWriter w(path);
  w.u32(0x4b435453);  // "STCK"
  w.u32(kCheckpointVersion);
  w.str(header.dump());
  for (const auto& [name, v] : arrays) {
    w.f64_array(v.data(), static_cast<std::size_t>(v.size()));
  }
  if (!w.good()) throw ConfigError("failed writing checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  BinaryReader r(path);
  if (r.u32() != 0x4b435453) throw ConfigError("not a checkpoint file: " + path);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.meta = nlohmann::json::parse(r.str());
  for (const auto& item : ck.meta.at("arrays")) {
    const std::string name = item.at("name");
    const auto len = item.at("len").get<Eigen::Index>();
    Eigen::VectorXd v(len);
    r.f64_array(v.data(), static_cast<std::size_t>(len));
    ck.arrays.emplace_back(name, std::move(v));
  }
  return ck;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& columns)
    : out_(path), n_cols_(columns.size()) {
  if (!out_) throw ConfigError("cannot open for writing: " + path);
  for (std::size_t i = 0; i < columns.size(); ++i) {
    out_ << columns[i] << (i + 1 < columns.size() ? "," : "\n");
  }
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != n_cols_) throw ConfigError("csv row width mismatch");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    out_ << cells[i] << (i + 1 < cells.size() ? "," : "\n");
  }
}

void CsvWriter::row_numeric(const std::vector<double>& cells) {
  std::vector<std::string> s;
  s.reserve(cells.size());
  for (double v : cells) s.push_back(fmt_double(v));
  row(s);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << content;
}

}  // namespace soiltdm
