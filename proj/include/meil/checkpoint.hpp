#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "meil/trainers.hpp"

namespace meil {

// ---------------------------------------------------------------------------
// Checkpoint (little-endian):
//   magic "MEILCKP1" | u32 method | i32 tasks_trained | nerf parameter set
//   | method payload | u32 log entries | entries
// Written after every task, so an interrupted sequence resumes at the next
// task boundary with bit-identical results (all randomness is per-task).
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'I', 'L', 'C', 'K', 'P', '1'};

namespace detail {

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is, "string length");
  if (n > 4096) throw IoError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError("truncated stream while reading string");
  return s;
}

inline std::uint64_t get_count(std::istream& is, const char* what, std::uint64_t limit = 1ull << 32) {
  const auto n = get<std::uint64_t>(is, what);
  if (n > limit) throw IoError(std::string("checkpoint: implausible ") + what);
  return n;
}

template <class T>
void put_vector(std::ostream& os, const std::vector<T>& v) {
  put<std::uint64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
std::vector<T> get_vector(std::istream& is, const char* what) {
  std::vector<T> v(get_count(is, what));
  if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T))))
    throw IoError(std::string("truncated stream while reading ") + what);
  return v;
}

inline void put_pose(std::ostream& os, const Pose& p) {
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) put<double>(os, p.rotation(r, c));
  for (int r = 0; r < 3; ++r) put<double>(os, p.origin(r));
}

inline Pose get_pose(std::istream& is) {
  Pose p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = get<double>(is, "pose");
  for (int r = 0; r < 3; ++r) p.origin(r) = get<double>(is, "pose");
  return p;
}

inline void put_rgn(std::ostream& os, const RgnState& r) {
  for (int h : r.config.hidden) put<std::int32_t>(os, h);
  put<std::int32_t>(os, r.config.bands);
  put<std::int32_t>(os, r.config.steps);
  put<double>(os, r.config.lr);
  put<std::uint64_t>(os, r.config.seed);
  r.net.write(os);
  put<std::int32_t>(os, r.tasks);
  put<std::int32_t>(os, r.views_per_task);
  put<double>(os, r.last_loss);
}

inline RgnState get_rgn(std::istream& is) {
  RgnState r;
  for (int& h : r.config.hidden) h = get<std::int32_t>(is, "generator width");
  r.config.bands = get<std::int32_t>(is, "generator bands");
  r.config.steps = get<std::int32_t>(is, "generator steps");
  r.config.lr = get<double>(is, "generator lr");
  r.config.seed = get<std::uint64_t>(is, "generator seed");
  r.net = ParamSet<double>::read(is);
  r.tasks = get<std::int32_t>(is, "generator tasks");
  r.views_per_task = get<std::int32_t>(is, "generator views");
  r.last_loss = get<double>(is, "generator loss");
  if (r.net.shapes() != r.config.layout()) throw IoError("checkpoint: generator weights do not match its configuration");
  return r;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const MethodState& s, const MetricsLog& log) {
  using namespace detail;
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.kind));
  put<std::int32_t>(os, s.tasks_trained);
  s.nerf.write(os);
  switch (s.kind) {
    case Method::Meil: {
      const auto& a = s.get<MeilAux>();
      a.teacher.write(os);
      put_rgn(os, a.rgn);
      put<std::uint64_t>(os, a.past_poses.size());
      for (const Pose& p : a.past_poses) put_pose(os, p);
      break;
    }
    case Method::Ewc: {
      const auto& a = s.get<EwcAux>();
      put_vector(os, a.fisher);
      a.anchor.write(os);
      put<float>(os, a.weight);
      break;
    }
    case Method::PackNet:
      put_vector(os, s.get<PackNetAux>().owner);
      break;
    case Method::Replay: {
      const auto& a = s.get<ReplayAux>();
      put<std::uint64_t>(os, a.capacity_per_task);
      put_vector(os, a.records);
      break;
    }
    case Method::Incre:
    case Method::Joint:
      break;
  }
  put<std::uint32_t>(os, static_cast<std::uint32_t>(log.entries.size()));
  for (const MetricsEntry& e : log.entries) {
    put_string(os, e.method);
    put<std::int32_t>(os, e.trained);
    put<std::int32_t>(os, e.evaluated);
    put<double>(os, e.psnr_db);
    put<double>(os, e.msssim);
    put<std::uint64_t>(os, e.aux_bytes);
    put<double>(os, e.wall_s);
  }
  if (!os) throw IoError("failed writing checkpoint");
}

inline std::pair<MethodState, MetricsLog> read_checkpoint(std::istream& is) {
  using namespace detail;
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("checkpoint: bad magic");
  MethodState s;
  const auto kind = get<std::uint32_t>(is, "method");
  if (kind > static_cast<std::uint32_t>(Method::Replay)) throw IoError("checkpoint: unknown method id");
  s.kind = static_cast<Method>(kind);
  s.tasks_trained = get<std::int32_t>(is, "task count");
  if (s.tasks_trained < 0 || s.tasks_trained > 255) throw IoError("checkpoint: implausible task count");
  s.nerf = ParamSet<float>::read(is);
  const std::size_t n = s.nerf.scalar_count();
  switch (s.kind) {
    case Method::Meil: {
      MeilAux a;
      a.teacher = ParamSet<float>::read(is);
      a.rgn = get_rgn(is);
      const auto poses = get_count(is, "pose count", 1u << 20);
      for (std::uint64_t i = 0; i < poses; ++i) a.past_poses.push_back(get_pose(is));
      if (a.teacher.shapes() != s.nerf.shapes()) throw IoError("checkpoint: teacher layout differs from the network");
      s.aux = std::move(a);
      break;
    }
    case Method::Ewc: {
      EwcAux a;
      a.fisher = get_vector<float>(is, "Fisher diagonal");
      a.anchor = ParamSet<float>::read(is);
      a.weight = get<float>(is, "EWC weight");
      if (a.fisher.size() != n || a.anchor.shapes() != s.nerf.shapes()) throw IoError("checkpoint: EWC state does not match the network");
      s.aux = std::move(a);
      break;
    }
    case Method::PackNet: {
      PackNetAux a{get_vector<std::uint8_t>(is, "PackNet owners")};
      if (a.owner.size() != n) throw IoError("checkpoint: PackNet mask does not match the network");
      s.aux = std::move(a);
      break;
    }
    case Method::Replay: {
      ReplayAux a;
      a.capacity_per_task = get<std::uint64_t>(is, "replay capacity");
      a.records = get_vector<ReplayRecord>(is, "replay records");
      s.aux = std::move(a);
      break;
    }
    case Method::Incre:
    case Method::Joint:
      break;
  }
  MetricsLog log;
  const auto entries = get<std::uint32_t>(is, "log size");
  if (entries > 1u << 20) throw IoError("checkpoint: implausible log size");
  for (std::uint32_t i = 0; i < entries; ++i) {
    MetricsEntry e;
    e.method = get_string(is);
    e.trained = get<std::int32_t>(is, "log entry");
    e.evaluated = get<std::int32_t>(is, "log entry");
    e.psnr_db = get<double>(is, "log entry");
    e.msssim = get<double>(is, "log entry");
    e.aux_bytes = get<std::uint64_t>(is, "log entry");
    e.wall_s = get<double>(is, "log entry");
    log.entries.push_back(std::move(e));
  }
  return {std::move(s), std::move(log)};
}

inline void save_checkpoint(const std::filesystem::path& path, const MethodState& s, const MetricsLog& log) {
  // Write-then-rename so an interrupted save never leaves a torn checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    write_checkpoint(os, s, log);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline std::pair<MethodState, MetricsLog> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const IoError& e) {
    throw IoError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

}  // namespace meil
