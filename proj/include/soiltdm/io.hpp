#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace soiltdm {

// Little-endian primitives over a stream. x86-64 host assumed.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void f64(double v);
  void f64_array(const double* data, std::size_t n);
  void str(const std::string& s);  // u32 length + bytes
  bool good() const { return static_cast<bool>(out_); }

 private:
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);
  std::uint8_t u8();
  std::uint32_t u32();
  double f64();
  void f64_array(double* data, std::size_t n);
  std::string str();

 private:
  std::ifstream in_;
};

// Self-describing checkpoint container: magic, format version, a JSON
// header, then the raw arrays listed in header["arrays"].
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Eigen::VectorXd>> arrays;

  void add(const std::string& name, const Eigen::VectorXd& v) {
    arrays.emplace_back(name, v);
  }
  const Eigen::VectorXd& get(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

// Formats a double so that it round-trips exactly and prints identically
// across runs.
std::string fmt_double(double v);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns);
  void row(const std::vector<std::string>& cells);
  void row_numeric(const std::vector<double>& cells);
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  std::size_t n_cols_;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace soiltdm
