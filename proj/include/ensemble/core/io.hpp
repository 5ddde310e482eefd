#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ensemble/core/matrix.hpp"

namespace ensemble::io {

namespace fs = std::filesystem;

enum class WavFormat { kPcm16, kFloat32 };

struct Wav {
  std::vector<double> samples;
  int sample_rate = 0;
};

/// Mono WAV writer; float32 keeps synthetic corpora lossless enough for training.
void write_wav(const fs::path& path, std::span<const double> samples, int sample_rate,
               WavFormat format = WavFormat::kFloat32);
Wav read_wav(const fs::path& path);

/// Binary matrix file: "ENSMAT01", u64 rows, u64 cols, f64 frame_rate, row-major f64 payload.
void write_matrix(const fs::path& path, const Matrix& m, double frame_rate);
Matrix read_matrix(const fs::path& path, double* frame_rate = nullptr);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const fs::path& path);
std::string sha256_doubles(std::span<const double> values);

}  // namespace ensemble::io
