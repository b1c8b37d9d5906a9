#include "povert/io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace povert::io {

using ad::Tensor;

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

namespace {

struct FileCloser {
  std::FILE* f = nullptr;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace

void write_png(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 3 || (img.shape[0] != 1 && img.shape[0] != 3))
    throw IoError("write_png needs a (1|3,H,W) tensor");
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];

  FileCloser fc{std::fopen(path.c_str(), "wb")};
  if (!fc.f) throw IoError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write failed: " + path);
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, w, h, 8, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<std::size_t>(w) * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const float v = img.at(ch, y, x);
        const float q = std::round(std::fmin(std::fmax(v, 0.0f), 1.0f) * 255.0f);
        row[static_cast<std::size_t>(x) * c + ch] = static_cast<unsigned char>(q);
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor<float> read_png(const std::string& path) {
  FileCloser fc{std::fopen(path.c_str(), "rb")};
  if (!fc.f) throw IoError("cannot open: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng read failed: " + path);
  }
  png_init_io(png, fc.f);
  png_read_info(png, info);

  // Normalize everything to 8-bit RGB.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> img = Tensor<float>::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
  return img;
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'V', 'R', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated container file");
  return v;
}

}  // namespace

void write_records(const std::string& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const Record& r : records) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.shape.size()));
    std::size_t n = 1;
    for (int d : r.shape) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    if (n != r.data.size()) throw IoError("record '" + r.name + "' shape/data mismatch");
    out.write(reinterpret_cast<const char*>(r.data.data()),
              static_cast<std::streamsize>(sizeof(float) * r.data.size()));
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<Record> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a PVRT container: " + path);
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw IoError("unsupported container version");
  const auto count = get<std::uint32_t>(in);
  std::vector<Record> out(count);
  for (Record& r : out) {
    const auto name_len = get<std::uint16_t>(in);
    r.name.resize(name_len);
    in.read(r.name.data(), name_len);
    const auto rank = get<std::uint8_t>(in);
    std::size_t n = 1;
    r.shape.resize(rank);
    for (int i = 0; i < rank; ++i) {
      r.shape[i] = static_cast<int>(get<std::uint32_t>(in));
      n *= static_cast<std::size_t>(r.shape[i]);
    }
    r.data.resize(n);
    in.read(reinterpret_cast<char*>(r.data.data()),
            static_cast<std::streamsize>(sizeof(float) * n));
    if (!in) throw IoError("truncated container file: " + path);
  }
  return out;
}

const Record* find_record(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

const char* kFieldTensorNames[] = {
    "map_w1", "map_b1", "map_w2", "map_b2",
    "mod_scale_w0", "mod_scale_b0", "mod_shift_w0", "mod_shift_b0", "lin_w0", "lin_b0",
    "mod_scale_w1", "mod_scale_b1", "mod_shift_w1", "mod_shift_b1", "lin_w1", "lin_b1",
    "mod_scale_w2", "mod_scale_b2", "mod_shift_w2", "mod_shift_b2", "lin_w2", "lin_b2",
    "sigma_w", "sigma_b", "color_w", "color_b"};

Record config_record(const field::GeneratorConfig& cfg) {
  Record r;
  r.name = "gen_config";
  std::vector<float> v{
      static_cast<float>(cfg.z_dim),          static_cast<float>(cfg.map_hidden),
      static_cast<float>(cfg.w_dim),          static_cast<float>(cfg.field_width),
      static_cast<float>(cfg.posenc_freqs),   static_cast<float>(cfg.image_size),
      static_cast<float>(cfg.samples_per_ray), static_cast<float>(cfg.radius),
      static_cast<float>(cfg.fov_deg),        static_cast<float>(cfg.density_bias),
      static_cast<float>(cfg.density_scale),  static_cast<float>(cfg.modulation_scale),
      static_cast<float>(cfg.mapping_linear ? 1 : 0), static_cast<float>(cfg.jitter ? 1 : 0),
      static_cast<float>(cfg.jitter_seed)};
  r.shape = {static_cast<int>(v.size())};
  r.data = std::move(v);
  return r;
}

field::GeneratorConfig config_from_record(const Record& r) {
  if (r.data.size() < 15) throw IoError("gen_config record too short");
  field::GeneratorConfig cfg;
  cfg.z_dim = static_cast<int>(r.data[0]);
  cfg.map_hidden = static_cast<int>(r.data[1]);
  cfg.w_dim = static_cast<int>(r.data[2]);
  cfg.field_width = static_cast<int>(r.data[3]);
  cfg.posenc_freqs = static_cast<int>(r.data[4]);
  cfg.image_size = static_cast<int>(r.data[5]);
  cfg.samples_per_ray = static_cast<int>(r.data[6]);
  cfg.radius = r.data[7];
  cfg.fov_deg = r.data[8];
  cfg.density_bias = r.data[9];
  cfg.density_scale = r.data[10];
  cfg.modulation_scale = r.data[11];
  cfg.mapping_linear = r.data[12] != 0;
  cfg.jitter = r.data[13] != 0;
  cfg.jitter_seed = static_cast<std::uint64_t>(r.data[14]);
  return cfg;
}

}  // namespace

template <class T>
void save_field_params(const std::string& path, const field::FieldParams<T>& p,
                       const field::GeneratorConfig& cfg) {
  std::vector<Record> recs{config_record(cfg)};
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i)
    recs.push_back(record_from(kFieldTensorNames[i], *ts[i]));
  write_records(path, recs);
}

template <class T>
field::FieldParams<T> load_field_params(const std::string& path,
                                        field::GeneratorConfig* cfg_out) {
  std::vector<Record> recs = read_records(path);
  const Record* cfg_rec = find_record(recs, "gen_config");
  if (!cfg_rec) throw IoError("checkpoint missing gen_config: " + path);
  field::GeneratorConfig cfg = config_from_record(*cfg_rec);
  if (cfg_out) *cfg_out = cfg;
  field::FieldParams<T> p;
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const Record* r = find_record(recs, kFieldTensorNames[i]);
    if (!r) throw IoError(std::string("checkpoint missing tensor ") + kFieldTensorNames[i]);
    *ts[i] = tensor_from<T>(*r);
  }
  return p;
}

template void save_field_params(const std::string&, const field::FieldParams<float>&,
                                const field::GeneratorConfig&);
template void save_field_params(const std::string&, const field::FieldParams<double>&,
                                const field::GeneratorConfig&);
template field::FieldParams<float> load_field_params(const std::string&,
                                                     field::GeneratorConfig*);
template field::FieldParams<double> load_field_params(const std::string&,
                                                      field::GeneratorConfig*);

template <class T>
void save_tensor(const std::string& path, const std::string& name, const Tensor<T>& t) {
  write_records(path, {record_from(name, t)});
}

template <class T>
Tensor<T> load_tensor(const std::string& path, const std::string& name) {
  std::vector<Record> recs = read_records(path);
  const Record* r = find_record(recs, name);
  if (!r) throw IoError("no record '" + name + "' in " + path);
  return tensor_from<T>(*r);
}

template void save_tensor(const std::string&, const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::string&, const std::string&);
template Tensor<double> load_tensor(const std::string&, const std::string&);

// ---------------------------------------------------------------------------
// Text artifacts
// ---------------------------------------------------------------------------

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_pose(const std::string& path, const camera::CameraPose& p) {
  write_text(path, camera::pose_to_line(p) + "\n");
}

camera::CameraPose read_pose(const std::string& path) {
  return camera::pose_from_line(read_text(path));
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  for (const auto& e : entries)
    out << e.seed << " " << camera::pose_to_line(e.pose) << " " << e.latent_path << " "
        << e.image_path << "\n";
  write_text(path, out.str());
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::istringstream in(read_text(path));
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    camera::CameraPose& p = e.pose;
    if (!(ls >> e.seed >> p.yaw >> p.pitch >> p.roll >> p.t[0] >> p.t[1] >> p.t[2] >>
          p.radius >> e.latent_path >> e.image_path))
      throw IoError("malformed manifest line: " + line);
    out.push_back(std::move(e));
  }
  return out;
}

void write_trace(const std::string& path, const std::vector<TraceRow>& rows) {
  std::ostringstream out;
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << r.iter << " " << r.term << " " << buf << "\n";
  }
  write_text(path, out.str());
}

std::vector<TraceRow> read_trace(const std::string& path) {
  std::istringstream in(read_text(path));
  std::vector<TraceRow> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    TraceRow r;
    if (!(ls >> r.iter >> r.term >> r.value)) throw IoError("malformed trace line: " + line);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace povert::io
