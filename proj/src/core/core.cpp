#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "ensemble/core/error.hpp"
#include "ensemble/core/io.hpp"
#include "ensemble/core/matrix.hpp"

namespace ensemble {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kDegenerateSignal: return "degenerate-signal error";
    case ErrorKind::kInsufficientAudio: return "insufficient-audio error";
    case ErrorKind::kInsufficientOverlap: return "insufficient-overlap error";
    case ErrorKind::kAlignment: return "alignment error";
    case ErrorKind::kCoverage: return "coverage error";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kNoVerse: return "no-verse error";
    case ErrorKind::kProtocol: return "protocol error";
    case ErrorKind::kMissingArtifact: return "missing-artifact error";
    case ErrorKind::kTrainingFailure: return "training failure";
    case ErrorKind::kSamplingFailure: return "sampling failure";
    case ErrorKind::kEvaluation: return "evaluation failure";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorKind::kValidation, "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const Matrix& m) { return all_finite(std::span<const double>(m.data(), m.size())); }

namespace io {

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorKind::kIo, "unexpected end of file");
  return v;
}

}  // namespace

void write_wav(const fs::path& path, std::span<const double> samples, int sample_rate, WavFormat format) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot open " + path.string());
  const std::uint16_t bits = format == WavFormat::kPcm16 ? 16 : 32;
  const std::uint16_t tag = format == WavFormat::kPcm16 ? 1 : 3;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * (bits / 8));
  os.write("RIFF", 4);
  put<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put<std::uint32_t>(os, 16);
  put<std::uint16_t>(os, tag);
  put<std::uint16_t>(os, 1);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(sample_rate));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(sample_rate) * (bits / 8));
  put<std::uint16_t>(os, bits / 8);
  put<std::uint16_t>(os, bits);
  os.write("data", 4);
  put<std::uint32_t>(os, data_bytes);
  for (double s : samples) {
    if (format == WavFormat::kPcm16) {
      const double c = std::clamp(s, -1.0, 1.0);
      put<std::int16_t>(os, static_cast<std::int16_t>(std::lrint(c * 32767.0)));
    } else {
      put<float>(os, static_cast<float>(s));
    }
  }
}

Wav read_wav(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kMissingArtifact, "cannot open " + path.string());
  char tag[4];
  is.read(tag, 4);
  require(is && std::memcmp(tag, "RIFF", 4) == 0, ErrorKind::kIo, "not a RIFF file: " + path.string());
  get<std::uint32_t>(is);
  is.read(tag, 4);
  require(is && std::memcmp(tag, "WAVE", 4) == 0, ErrorKind::kIo, "not a WAVE file: " + path.string());
  std::uint16_t fmt = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  Wav wav;
  while (is.read(tag, 4)) {
    const auto len = get<std::uint32_t>(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      fmt = get<std::uint16_t>(is);
      channels = get<std::uint16_t>(is);
      rate = get<std::uint32_t>(is);
      get<std::uint32_t>(is);
      get<std::uint16_t>(is);
      bits = get<std::uint16_t>(is);
      if (len > 16) is.ignore(len - 16);
    } else if (std::memcmp(tag, "data", 4) == 0) {
      require(channels == 1, ErrorKind::kIo, "only mono WAV is supported");
      const std::size_t n = len / (bits / 8);
      wav.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        if (fmt == 1 && bits == 16)
          wav.samples[i] = get<std::int16_t>(is) / 32767.0;
        else if (fmt == 3 && bits == 32)
          wav.samples[i] = get<float>(is);
        else
          fail(ErrorKind::kIo, "unsupported WAV sample format");
      }
      break;
    } else {
      is.ignore(len);
    }
  }
  wav.sample_rate = static_cast<int>(rate);
  return wav;
}

void write_matrix(const fs::path& path, const Matrix& m, double frame_rate) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot open " + path.string());
  os.write("ENSMAT01", 8);
  put<std::uint64_t>(os, m.rows());
  put<std::uint64_t>(os, m.cols());
  put<double>(os, frame_rate);
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix read_matrix(const fs::path& path, double* frame_rate) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kMissingArtifact, "cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  require(is && std::memcmp(magic, "ENSMAT01", 8) == 0, ErrorKind::kIo, "bad matrix header: " + path.string());
  const auto rows = get<std::uint64_t>(is);
  const auto cols = get<std::uint64_t>(is);
  const auto fr = get<double>(is);
  if (frame_rate) *frame_rate = fr;
  Matrix m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  require(static_cast<bool>(is), ErrorKind::kIo, "truncated matrix file: " + path.string());
  return m;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::kMissingArtifact, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot open " + path.string());
  os << text;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kMissingArtifact, "cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return sha256_hex(buf);
}

std::string sha256_doubles(std::span<const double> values) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(values.data()), values.size_bytes()));
}

}  // namespace io
}  // namespace ensemble
