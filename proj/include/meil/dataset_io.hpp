#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include <nlohmann/json.hpp>

#include "meil/scenes.hpp"

namespace meil {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Raw float image: magic "MEILIMG1" | u32 height | u32 width | u32 channels |
// height*width*channels float32, row-major, little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kImageMagic[8] = {'M', 'E', 'I', 'L', 'I', 'M', 'G', '1'};

inline void write_float_image(const fs::path& path, const ImageBuffer& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kImageMagic, sizeof(kImageMagic));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(img.height));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(img.width));
  detail::put<std::uint32_t>(os, 3);
  os.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!os) throw IoError("failed writing " + path.string());
}

inline ImageBuffer read_float_image(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing image file " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kImageMagic, sizeof(magic)) != 0)
    throw IoError("bad image header in " + path.string());
  try {
    const auto h = detail::get<std::uint32_t>(is, "image height");
    const auto w = detail::get<std::uint32_t>(is, "image width");
    const auto c = detail::get<std::uint32_t>(is, "image channels");
    if (c != 3 || h == 0 || w == 0 || h > 16384 || w > 16384) throw IoError("unsupported image shape");
    ImageBuffer img(static_cast<int>(w), static_cast<int>(h));
    if (!is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size() * sizeof(float))))
      throw IoError("truncated pixel data");
    return img;
  } catch (const IoError& e) {
    throw IoError(std::string(e.what()) + " in " + path.string());
  }
}

/// 8-bit RGB preview; values clamped to [0, 1].
inline void write_png(const fs::path& path, const ImageBuffer& img) {
  std::vector<png_byte> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw IoError("failed writing PNG " + path.string() + ": " + image.message);
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json plus, per view, tT_vV.f32 (exact pixels)
// and tT_vV.png (preview). Poses are 12 numbers: the 3x4 camera-to-world
// matrix [R | origin], row-major.
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestName = "manifest.json";

inline nlohmann::json pose_to_json(const Pose& p) {
  nlohmann::json a = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a.push_back(p.rotation(r, c));
    a.push_back(p.origin(r));
  }
  return a;
}

inline Pose pose_from_json(const nlohmann::json& a, const std::string& where) {
  if (!a.is_array() || a.size() != 12) throw IoError(where + ": pose must be 12 numbers");
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = a.at(static_cast<std::size_t>(r * 4 + c)).get<double>();
    p.origin(r) = a.at(static_cast<std::size_t>(r * 4 + 3)).get<double>();
  }
  try {
    p.validate(1e-6);
  } catch (const DomainError& e) {
    throw IoError(where + ": " + e.what());
  }
  return p;
}

inline void save_dataset(std::span<const Task> tasks, const fs::path& dir) {
  if (tasks.empty()) throw DomainError("save_dataset: no tasks");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  const Intrinsics& intr = tasks.front().intr;
  nlohmann::json m;
  m["format"] = "meil-dataset";
  m["version"] = 1;
  m["intrinsics"] = {{"focal", intr.focal}, {"width", intr.width}, {"height", intr.height}, {"cx", intr.cx}, {"cy", intr.cy}};
  m["tasks"] = nlohmann::json::array();
  for (const Task& t : tasks) {
    t.validate();
    nlohmann::json jt;
    jt["index"] = t.index;
    jt["views"] = nlohmann::json::array();
    for (std::size_t v = 0; v < t.views.size(); ++v) {
      const std::string stem = "t" + std::to_string(t.index) + "_v" + std::to_string(v);
      write_float_image(dir / (stem + ".f32"), t.views[v].image);
      write_png(dir / (stem + ".png"), t.views[v].image);
      jt["views"].push_back({{"pose", pose_to_json(t.views[v].pose)}, {"image", stem + ".f32"}, {"preview", stem + ".png"}});
    }
    m["tasks"].push_back(jt);
  }
  std::ofstream os(dir / kManifestName);
  if (!os) throw IoError("cannot write " + (dir / kManifestName).string());
  os << m.dump(2) << "\n";
}

inline std::vector<Task> load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / kManifestName;
  std::ifstream is(mpath);
  if (!is) throw IoError("missing dataset manifest " + mpath.string());
  nlohmann::json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  try {
    if (m.at("format") != "meil-dataset" || m.at("version") != 1) throw IoError("unsupported dataset format in " + mpath.string());
    const auto& ji = m.at("intrinsics");
    Intrinsics intr{ji.at("focal").get<double>(), ji.at("width").get<int>(), ji.at("height").get<int>(), ji.at("cx").get<double>(),
                    ji.at("cy").get<double>()};
    intr.validate();
    std::vector<Task> tasks;
    for (const auto& jt : m.at("tasks")) {
      Task t;
      t.index = jt.at("index").get<int>();
      t.intr = intr;
      if (t.index != static_cast<int>(tasks.size()) + 1) throw IoError("manifest tasks must be numbered 1..T in order");
      std::size_t v = 0;
      for (const auto& jv : jt.at("views")) {
        const std::string where = "task " + std::to_string(t.index) + " view " + std::to_string(v++);
        View view;
        view.pose = pose_from_json(jv.at("pose"), where);
        view.image = read_float_image(dir / jv.at("image").get<std::string>());
        t.views.push_back(std::move(view));
      }
      t.validate();
      tasks.push_back(std::move(t));
    }
    if (tasks.empty()) throw IoError("manifest " + mpath.string() + " lists no tasks");
    return tasks;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + mpath.string() + ": " + e.what());
  }
}

/// Content hash over the manifest and every exact image dump.
inline std::uint64_t dataset_hash(const fs::path& dir) {
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("missing file " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  const std::string manifest = slurp(dir / kManifestName);
  std::uint64_t h = fnv1a(manifest.data(), manifest.size());
  const nlohmann::json m = nlohmann::json::parse(manifest);
  for (const auto& jt : m.at("tasks"))
    for (const auto& jv : jt.at("views")) {
      const std::string bytes = slurp(dir / jv.at("image").get<std::string>());
      h = fnv1a(bytes.data(), bytes.size(), h);
    }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex;
  ss.width(16);
  ss.fill('0');
  ss << v;
  return ss.str();
}

}  // namespace meil
