#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "cnc/backbone.hpp"
#include "cnc/core/optim.hpp"

namespace cnc::ckpt {

// Layout: "CNCK" u32 version, then sections {u32 name length, name, u64 payload length, payload,
// u64 FNV-1a of payload} in the fixed order below. Integers are little-endian.
inline constexpr char kMagic[4] = {'C', 'N', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;
inline const std::vector<std::string> kSections{"meta", "params", "optimizer", "rng", "end"};

struct ParamBlob {
  std::string name;
  std::string group;
  Shape shape;
  std::vector<float> data;
  bool operator==(const ParamBlob&) const = default;
};

struct MomentBlob {
  std::string name;
  std::vector<float> m, v;
  bool operator==(const MomentBlob&) const = default;
};

struct Checkpoint {
  nlohmann::json meta;  ///< architecture_hash, stage, step, epoch, unet, model_seed, config
  std::vector<ParamBlob> params;
  long optimizer_step = 0;
  double optimizer_lr = 0;
  std::vector<MomentBlob> moments;
  std::string rng;

  bool operator==(const Checkpoint&) const = default;

  std::string architecture_hash() const { return meta.value("architecture_hash", std::string{}); }
  std::string stage() const { return meta.value("stage", std::string{}); }
  long step() const { return meta.value("step", 0L); }
};

namespace detail {

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void floats(const std::vector<float>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(float));
  }
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : data_(bytes), what_(std::move(what)) {}
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string str() { return take(u32()); }
  std::vector<float> floats() {
    const std::uint64_t n = u64();
    need(n * sizeof(float));
    std::vector<float> v(n);
    std::memcpy(v.data(), data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  template <typename P>
  P pod() {
    need(sizeof(P));
    P v;
    std::memcpy(&v, data_.data() + pos_, sizeof(P));
    pos_ += sizeof(P);
    return v;
  }
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail(ErrorKind::load, what_ + ": unexpected end of data");
  }
  const std::string& data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string encode_params(const Checkpoint& c) {
  Writer w;
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    w.str(p.name);
    w.str(p.group);
    w.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) w.u32(static_cast<std::uint32_t>(d));
    w.floats(p.data);
  }
  return std::move(w.bytes());
}

inline std::string encode_optimizer(const Checkpoint& c) {
  Writer w;
  w.u64(static_cast<std::uint64_t>(c.optimizer_step));
  w.f64(c.optimizer_lr);
  w.u32(static_cast<std::uint32_t>(c.moments.size()));
  for (const auto& m : c.moments) {
    w.str(m.name);
    w.floats(m.m);
    w.floats(m.v);
  }
  return std::move(w.bytes());
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  detail::Writer w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  auto section = [&](const std::string& name, const std::string& payload) {
    w.str(name);
    w.u64(payload.size());
    w.raw(payload.data(), payload.size());
    w.u64(fnv1a64(payload));
  };
  section("meta", c.meta.dump());
  section("params", detail::encode_params(c));
  section("optimizer", detail::encode_optimizer(c));
  section("rng", c.rng);
  section("end", {});
  return std::move(w.bytes());
}

inline Checkpoint deserialize(const std::string& bytes, const std::string& origin = "checkpoint") {
  require(bytes.size() >= 8 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::load,
          origin + ": not a checkpoint (bad magic)");
  detail::Reader r(bytes, origin);
  r.take(4);
  const std::uint32_t version = r.u32();
  require(version == kVersion, ErrorKind::load,
          origin + ": checkpoint version " + std::to_string(version) + " unsupported (expected " +
              std::to_string(kVersion) + ")");
  std::map<std::string, std::string> payloads;
  for (const auto& expected : kSections) {
    if (r.remaining() == 0) fail(ErrorKind::load, origin + ": truncated, missing section '" + expected + "'");
    std::string name, payload;
    std::uint64_t checksum = 0;
    try {
      name = r.str();
      payload = r.take(r.u64());
      checksum = r.u64();
    } catch (const Error&) {
      fail(ErrorKind::load, origin + ": truncated, missing section '" + expected + "'");
    }
    require(checksum == fnv1a64(payload), ErrorKind::load, origin + ": section '" + name + "' fails its checksum");
    require(name == expected, ErrorKind::load, origin + ": expected section '" + expected + "', found '" + name + "'");
    payloads[name] = std::move(payload);
  }
  require(r.done(), ErrorKind::load, origin + ": trailing bytes after end section");

  Checkpoint c;
  try {
    c.meta = nlohmann::json::parse(payloads["meta"]);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::load, origin + ": meta section is not valid JSON: " + e.what());
  }
  {
    detail::Reader p(payloads["params"], origin + " params");
    const std::uint32_t n = p.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      ParamBlob b;
      b.name = p.str();
      b.group = p.str();
      const std::uint32_t rank = p.u32();
      for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(static_cast<int>(p.u32()));
      b.data = p.floats();
      require(b.data.size() == shape_size(b.shape), ErrorKind::load, origin + ": parameter " + b.name + " size mismatch");
      c.params.push_back(std::move(b));
    }
  }
  {
    detail::Reader o(payloads["optimizer"], origin + " optimizer");
    c.optimizer_step = static_cast<long>(o.u64());
    c.optimizer_lr = o.f64();
    const std::uint32_t n = o.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      MomentBlob m;
      m.name = o.str();
      m.m = o.floats();
      m.v = o.floats();
      c.moments.push_back(std::move(m));
    }
  }
  c.rng = payloads["rng"];
  return c;
}

/// Writes to a sibling temp file, flushes, then renames over the destination.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(static_cast<bool>(out), ErrorKind::io, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorKind::io, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) { write_atomic(path, serialize(c)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path), path.string());
}

/// Snapshot of a model plus optional optimizer and rng state.
inline Checkpoint capture(const backbone::ControlledUNet<float>& model, const nn::Adam<float>* opt,
                          const std::mt19937_64* rng, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.meta = std::move(meta);
  c.meta["architecture_hash"] = model.architecture_hash();
  c.meta["unet"] = model.config().to_json();
  c.meta["model_seed"] = model.seed();
  for (const auto& p : model.params().params())
    c.params.push_back({p.name, p.group, p.var.shape(), p.var.value().to_vector()});
  if (opt) {
    c.optimizer_step = opt->step_count();
    c.optimizer_lr = opt->lr();
    for (const auto& [name, mo] : opt->moments()) c.moments.push_back({name, mo.m.to_vector(), mo.v.to_vector()});
  }
  if (rng) c.rng = rng_state(*rng);
  return c;
}

/// Rebuilds the model a checkpoint was taken from.
inline std::unique_ptr<backbone::ControlledUNet<float>> build_from(const Checkpoint& c) {
  require(c.meta.contains("unet"), ErrorKind::load, "checkpoint has no model configuration");
  auto model = backbone::build_unet<float>(backbone::UNetConfig::from_json(c.meta["unet"]),
                                           c.meta.value("model_seed", std::uint64_t{0}));
  return model;
}

/// Copies parameters (and optionally optimizer / rng state) into live objects.
inline void restore(const Checkpoint& c, backbone::ControlledUNet<float>& model, nn::Adam<float>* opt = nullptr,
                    std::mt19937_64* rng = nullptr) {
  const std::string expect = model.architecture_hash();
  require(c.architecture_hash() == expect, ErrorKind::incompatible,
          "checkpoint architecture " + c.architecture_hash() + " does not match model " + expect);
  require(c.params.size() == model.params().params().size(), ErrorKind::incompatible, "parameter count mismatch");
  for (const auto& b : c.params) {
    auto* p = model.params().find(b.name);
    require(p != nullptr && p->var.shape() == b.shape && p->group == b.group, ErrorKind::incompatible,
            "parameter " + b.name + " does not match the model");
    p->var.mutable_value() = Tensor<float>(b.shape, b.data);
  }
  if (opt) {
    opt->set_step_count(c.optimizer_step);
    opt->moments().clear();
    for (const auto& m : c.moments) {
      const auto* p = model.params().find(m.name);
      require(p != nullptr && m.m.size() == p->var.value().size(), ErrorKind::incompatible,
              "optimizer state for unknown parameter " + m.name);
      opt->moments()[m.name] = {Tensor<float>(p->var.shape(), m.m), Tensor<float>(p->var.shape(), m.v)};
    }
  }
  if (rng && !c.rng.empty()) restore_rng(*rng, c.rng);
}

}  // namespace cnc::ckpt
