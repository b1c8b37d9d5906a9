#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "povert/camera.hpp"
#include "povert/field.hpp"
#include "povert/tensor.hpp"

namespace povert::io {

// ---------------------------------------------------------------------------
// PNG (8-bit). Images are (C,H,W) tensors, C = 1 or 3, values in [0,1];
// writing quantizes with round(v*255). Reading normalizes any 8/16-bit
// gray/rgb/rgba PNG to float RGB (C=3) in [0,1].
// ---------------------------------------------------------------------------

void write_png(const std::string& path, const ad::Tensor<float>& img);
ad::Tensor<float> read_png(const std::string& path);

// ---------------------------------------------------------------------------
// Binary tensor container ("PVRT"): little-endian, magic "PVRT", u32 version,
// u32 record count; per record: u16 name length + name bytes, u8 rank,
// u32 dims[rank], f32 payload (row-major). Used for latents, depth maps and
// network checkpoints.
// ---------------------------------------------------------------------------

struct Record {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

void write_records(const std::string& path, const std::vector<Record>& records);
std::vector<Record> read_records(const std::string& path);
const Record* find_record(const std::vector<Record>& records, const std::string& name);

template <class T>
Record record_from(const std::string& name, const ad::Tensor<T>& t) {
  Record r;
  r.name = name;
  r.shape = t.shape;
  r.data.resize(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) r.data[i] = static_cast<float>(t.data[i]);
  return r;
}

template <class T>
ad::Tensor<T> tensor_from(const Record& r) {
  ad::Tensor<T> t;
  t.shape = r.shape;
  t.data.resize(r.data.size());
  for (std::size_t i = 0; i < r.data.size(); ++i) t.data[i] = static_cast<T>(r.data[i]);
  return t;
}

// Generator checkpoints: one record per weight tensor plus the architecture
// numbers, so a checkpoint is self-describing.
template <class T>
void save_field_params(const std::string& path, const field::FieldParams<T>& p,
                       const field::GeneratorConfig& cfg);
template <class T>
field::FieldParams<T> load_field_params(const std::string& path,
                                        field::GeneratorConfig* cfg_out = nullptr);

// Single-tensor conveniences (latents, depth maps).
template <class T>
void save_tensor(const std::string& path, const std::string& name, const ad::Tensor<T>& t);
template <class T>
ad::Tensor<T> load_tensor(const std::string& path, const std::string& name);

// ---------------------------------------------------------------------------
// Text artifacts
// ---------------------------------------------------------------------------

void write_pose(const std::string& path, const camera::CameraPose& p);
camera::CameraPose read_pose(const std::string& path);

/// One pseudo-pair per line: seed, 7-float pose, latent path, image path.
struct ManifestEntry {
  std::uint64_t seed = 0;
  camera::CameraPose pose;
  std::string latent_path;
  std::string image_path;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

/// Loss traces: "iter term value" per line.
struct TraceRow {
  int iter = 0;
  std::string term;
  double value = 0;
};

void write_trace(const std::string& path, const std::vector<TraceRow>& rows);
std::vector<TraceRow> read_trace(const std::string& path);

void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

}  // namespace povert::io
