#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "domex/error.hpp"
#include "domex/ewc/ewc.hpp"
#include "domex/io/files.hpp"
#include "domex/nn/network.hpp"

namespace domex::io {

// Checkpoint directory layout:
//   manifest.json  version, architecture fingerprint, BN source, tensor index, config echo
//   tensors.f32    every float (parameters, running statistics, Fisher, anchor), little-endian

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "domex-checkpoint";

struct Checkpoint {
  Network network;
  std::optional<EwcState> ewc;
  nlohmann::json config = nlohmann::json::object();
};

namespace detail {

inline nlohmann::json put_tensor(ByteWriter& blob, const std::string& name, const Tensor& t) {
  nlohmann::json e = {{"name", name}, {"shape", t.shape()}, {"offset", blob.size() / 4}};
  blob.f32s(t.data());
  return e;
}

inline nlohmann::json put_floats(ByteWriter& blob, std::span<const float> v) {
  nlohmann::json e = {{"offset", blob.size() / 4}, {"count", v.size()}};
  blob.f32s(v);
  return e;
}

inline Tensor get_tensor(ByteReader& blob, const nlohmann::json& e) {
  Shape shape = e.at("shape").get<Shape>();
  Tensor t(shape);
  blob.seek(e.at("offset").get<std::size_t>() * 4);
  blob.f32s(t.data());
  return t;
}

inline std::vector<float> get_floats(ByteReader& blob, const nlohmann::json& e) {
  std::vector<float> v(e.at("count").get<std::size_t>());
  blob.seek(e.at("offset").get<std::size_t>() * 4);
  blob.f32s(v);
  return v;
}

inline nlohmann::json put_map(ByteWriter& blob, const TensorMap& m) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [name, t] : m) out.push_back(put_tensor(blob, name, t));
  return out;
}

inline TensorMap get_map(ByteReader& blob, const nlohmann::json& entries) {
  TensorMap m;
  for (const auto& e : entries) m.emplace(e.at("name").get<std::string>(), get_tensor(blob, e));
  return m;
}

}  // namespace detail

inline void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
  ensure_directory(dir);
  ByteWriter blob;
  nlohmann::json params = nlohmann::json::array();
  for (const Parameter* p : ck.network.parameters()) params.push_back(detail::put_tensor(blob, p->name, p->value));

  nlohmann::json stats = nlohmann::json::array();
  for (const BatchNormLayer* bn : ck.network.batch_norms()) {
    for (const auto& [domain, rs] : bn->all_stats()) {
      stats.push_back({{"layer", bn->name()},
                       {"domain", std::string(to_string(domain))},
                       {"mean", detail::put_floats(blob, rs.mean)},
                       {"var", detail::put_floats(blob, rs.var)}});
    }
  }

  nlohmann::json ewc = nullptr;
  if (ck.ewc) {
    ewc = {{"fisher_samples", ck.ewc->fisher_samples},
           {"anchor", detail::put_map(blob, ck.ewc->anchor.params)},
           {"fisher", detail::put_map(blob, ck.ewc->fisher.values)}};
  }

  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"version", kCheckpointVersion},
                             {"fingerprint", std::string(Network::fingerprint())},
                             {"bn_source", to_string(ck.network.bn_source())},
                             {"parameters", params},
                             {"bn_stats", stats},
                             {"ewc", ewc},
                             {"config", ck.config},
                             {"blob", {{"file", "tensors.f32"}, {"fnv1a", hex64(fnv1a(blob.bytes()))}}}};
  atomic_write(dir / "tensors.f32", blob.bytes());
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Loads a checkpoint. A different architecture fingerprint is an
/// InputError; anything unreadable or inconsistent is an IoError.
inline Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path file = dir / "manifest.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest '" + file.string() + "' is not valid JSON: " + e.what());
  }
  if (!m.is_object() || m.value("format", "") != kCheckpointFormat) {
    throw IoError("'" + file.string() + "' is not a checkpoint manifest");
  }
  if (!m.contains("fingerprint") || !m["fingerprint"].is_string()) {
    throw IoError("checkpoint manifest '" + file.string() + "' has no architecture fingerprint");
  }
  if (const auto fp = m["fingerprint"].get<std::string>(); fp != Network::fingerprint()) {
    throw InputError("checkpoint architecture '" + fp + "' does not match '" +
                     std::string(Network::fingerprint()) + "'");
  }
  try {
    if (m.at("version").get<int>() != kCheckpointVersion) {
      throw IoError("unsupported checkpoint version " + m.at("version").dump());
    }
    const std::string bytes = read_file(dir / m.at("blob").at("file").get<std::string>());
    if (hex64(fnv1a(bytes)) != m.at("blob").at("fnv1a").get<std::string>()) {
      throw IoError("checksum mismatch in checkpoint blob under '" + dir.string() + "'");
    }
    ByteReader blob(bytes, "tensors.f32");

    Checkpoint ck;
    std::size_t seen = 0;
    for (const auto& e : m.at("parameters")) {
      Parameter& p = ck.network.parameter(e.at("name").get<std::string>());
      Tensor t = detail::get_tensor(blob, e);
      if (t.shape() != p.value.shape()) throw IoError("shape mismatch for parameter '" + p.name + "'");
      p.value = std::move(t);
      ++seen;
    }
    if (seen != ck.network.parameters().size()) throw IoError("checkpoint is missing parameters");

    for (const auto& e : m.at("bn_stats")) {
      const auto layer = e.at("layer").get<std::string>();
      BatchNormLayer* target = nullptr;
      for (BatchNormLayer* bn : ck.network.batch_norms()) {
        if (bn->name() == layer) target = bn;
      }
      if (target == nullptr) throw IoError("unknown BN layer '" + layer + "'");
      RunningStats rs{detail::get_floats(blob, e.at("mean")), detail::get_floats(blob, e.at("var"))};
      target->set_stats(parse_domain(e.at("domain").get<std::string>()), std::move(rs));
    }
    ck.network.set_bn_source(parse_stat_source(m.at("bn_source").get<std::string>()));

    if (!m.at("ewc").is_null()) {
      const auto& e = m.at("ewc");
      EwcState st;
      st.fisher_samples = e.at("fisher_samples").get<std::size_t>();
      st.anchor.params = detail::get_map(blob, e.at("anchor"));
      st.fisher.values = detail::get_map(blob, e.at("fisher"));
      ck.ewc = std::move(st);
    }
    ck.config = m.at("config");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest '" + file.string() + "' is malformed: " + e.what());
  } catch (const ShapeError& e) {
    throw IoError("checkpoint under '" + dir.string() + "' is inconsistent: " + e.what());
  } catch (const StateError& e) {
    throw IoError("checkpoint under '" + dir.string() + "' is inconsistent: " + e.what());
  } catch (const InputError& e) {
    throw IoError("checkpoint under '" + dir.string() + "' is inconsistent: " + e.what());
  }
}

}  // namespace domex::io
