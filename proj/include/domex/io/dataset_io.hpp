#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "domex/data/synth.hpp"
#include "domex/error.hpp"
#include "domex/io/files.hpp"

namespace domex::io {

// Dataset directory layout:
//   manifest.json  specs, seed, shift, patient list with splits and record ranges
//   images.f32     little-endian float32 pixels, records in order (O then T)
//   records.bin    per record: patient id, label, domain, subscanner (4 x int32 LE)

inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kDatasetFormat = "domex-dataset";

inline nlohmann::json spec_to_json(const DomainSpec& s) {
  return {{"name", s.name},
          {"gain", s.gain},
          {"offset", s.offset},
          {"noise_sigma", s.noise_sigma},
          {"texture_freq", s.texture_freq},
          {"bit_depth", s.bit_depth}};
}

inline DomainSpec spec_from_json(const nlohmann::json& j) {
  DomainSpec s;
  s.name = j.at("name").get<std::string>();
  s.gain = j.at("gain").get<double>();
  s.offset = j.at("offset").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.texture_freq = j.at("texture_freq").get<double>();
  s.bit_depth = j.at("bit_depth").get<int>();
  return s;
}

/// Per-class counts of one domain.
inline std::array<std::size_t, kNumClasses> class_counts(const Dataset& ds) {
  std::array<std::size_t, kNumClasses> c{};
  for (const auto& r : ds.records) ++c[static_cast<std::size_t>(r.label)];
  return c;
}

inline void save_dataset(const fs::path& dir, const DomainPair& pair) {
  ensure_directory(dir);
  ByteWriter images, table;
  nlohmann::json patients = nlohmann::json::array();
  std::size_t index = 0;
  for (const Dataset* ds : {&pair.o, &pair.t}) {
    std::size_t i = 0;
    while (i < ds->records.size()) {
      const std::uint32_t pid = ds->records[i].patient_id;
      const std::size_t first = index;
      for (; i < ds->records.size() && ds->records[i].patient_id == pid; ++i, ++index) {
        const SampleRecord& r = ds->records[i];
        images.f32s(r.image);
        table.u32(r.patient_id);
        table.i32(r.label);
        table.i32(static_cast<std::int32_t>(r.domain));
        table.i32(r.subscanner);
      }
      patients.push_back({{"id", pid},
                          {"domain", std::string(to_string(ds->domain))},
                          {"split", std::string(to_string(ds->split.at(pid)))},
                          {"first_record", first},
                          {"records", index - first}});
    }
  }

  nlohmann::json domains;
  for (const Dataset* ds : {&pair.o, &pair.t}) {
    nlohmann::json specs = nlohmann::json::array();
    double gain_sum = 0.0;
    for (const auto& s : ds->specs) {
      specs.push_back(spec_to_json(s));
      gain_sum += s.gain;
    }
    const auto counts = class_counts(*ds);
    domains[std::string(to_string(ds->domain))] = {
        {"specs", specs},
        {"centroid_gain", gain_sum / static_cast<double>(ds->specs.size())},
        {"records", ds->records.size()},
        {"class_counts", counts}};
  }

  nlohmann::json manifest = {{"format", kDatasetFormat},
                             {"version", kDatasetVersion},
                             {"seed", pair.seed},
                             {"shift", pair.shift},
                             {"image_side", kImageSide},
                             {"domains", domains},
                             {"patients", patients},
                             {"records",
                              {{"count", index},
                               {"images", "images.f32"},
                               {"images_fnv1a", hex64(fnv1a(images.bytes()))},
                               {"table", "records.bin"},
                               {"table_fnv1a", hex64(fnv1a(table.bytes()))}}}};
  atomic_write(dir / "images.f32", images.bytes());
  atomic_write(dir / "records.bin", table.bytes());
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

namespace detail {

inline nlohmann::json parse_manifest(const fs::path& file, const char* format) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest '" + file.string() + "' is not valid JSON: " + e.what());
  }
  if (!m.is_object() || m.value("format", "") != format) {
    throw IoError("manifest '" + file.string() + "' is not a " + format + " manifest");
  }
  return m;
}

inline std::string checked_blob(const fs::path& dir, const nlohmann::json& entry, const char* name_key,
                                const char* hash_key) {
  const fs::path file = dir / entry.at(name_key).get<std::string>();
  std::string bytes = read_file(file);
  if (hex64(fnv1a(bytes)) != entry.at(hash_key).get<std::string>()) {
    throw IoError("checksum mismatch in '" + file.string() + "'");
  }
  return bytes;
}

}  // namespace detail

/// Loads and validates a dataset directory. Any inconsistency is an IoError.
inline DomainPair load_dataset(const fs::path& dir) {
  const nlohmann::json m = detail::parse_manifest(dir / "manifest.json", kDatasetFormat);
  try {
    if (m.at("version").get<int>() != kDatasetVersion) {
      throw IoError("unsupported dataset version " + m.at("version").dump());
    }
    if (m.at("image_side").get<std::size_t>() != kImageSide) throw IoError("image side mismatch");
    const auto& rec = m.at("records");
    const std::size_t count = rec.at("count").get<std::size_t>();
    const std::string images = detail::checked_blob(dir, rec, "images", "images_fnv1a");
    const std::string table = detail::checked_blob(dir, rec, "table", "table_fnv1a");
    if (images.size() != count * synth::kPixels * 4) throw IoError("images blob size does not match record count");
    if (table.size() != count * 16) throw IoError("record table size does not match record count");

    DomainPair pair;
    pair.seed = m.at("seed").get<std::uint64_t>();
    pair.shift = m.at("shift").get<double>();
    pair.o.domain = Domain::O;
    pair.t.domain = Domain::T;
    for (Dataset* ds : {&pair.o, &pair.t}) {
      for (const auto& s : m.at("domains").at(std::string(to_string(ds->domain))).at("specs")) {
        ds->specs.push_back(spec_from_json(s));
      }
    }

    ByteReader img(images, "images.f32");
    ByteReader tab(table, "records.bin");
    std::size_t expected_first = 0;
    for (const auto& p : m.at("patients")) {
      const auto pid = p.at("id").get<std::uint32_t>();
      const Domain d = parse_domain(p.at("domain").get<std::string>());
      if (d == Domain::Joint) throw IoError("patient " + std::to_string(pid) + " has no single domain");
      Dataset& ds = d == Domain::O ? pair.o : pair.t;
      const std::size_t first = p.at("first_record").get<std::size_t>();
      const std::size_t n = p.at("records").get<std::size_t>();
      if (first != expected_first || n == 0 || first + n > count) {
        throw IoError("record range of patient " + std::to_string(pid) + " is inconsistent");
      }
      expected_first += n;
      if (!ds.split.emplace(pid, parse_split(p.at("split").get<std::string>())).second) {
        throw IoError("patient " + std::to_string(pid) + " listed twice");
      }
      for (std::size_t k = 0; k < n; ++k) {
        SampleRecord r;
        r.patient_id = tab.u32();
        r.label = tab.i32();
        const std::int32_t dom = tab.i32();
        r.subscanner = tab.i32();
        if (r.patient_id != pid || dom != static_cast<std::int32_t>(d)) {
          throw IoError("record table disagrees with manifest for patient " + std::to_string(pid));
        }
        if (r.label < 0 || r.label >= static_cast<int>(kNumClasses)) {
          throw IoError("label " + std::to_string(r.label) + " out of range");
        }
        const int max_sub = d == Domain::O ? static_cast<int>(ds.specs.size()) - 1 : -1;
        if (r.subscanner < (d == Domain::O ? 0 : -1) || r.subscanner > max_sub) {
          throw IoError("subscanner index out of range for patient " + std::to_string(pid));
        }
        r.domain = d;
        r.image.resize(synth::kPixels);
        img.f32s(r.image);
        ds.records.push_back(std::move(r));
      }
    }
    if (expected_first != count) throw IoError("patient list does not cover every record");
    if (pair.o.specs.empty() || pair.t.specs.size() != 1) throw IoError("domain specs are incomplete");
    return pair;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset manifest in '" + dir.string() + "' is malformed: " + e.what());
  } catch (const InputError& e) {
    throw IoError("dataset manifest in '" + dir.string() + "' is malformed: " + e.what());
  }
}

}  // namespace domex::io
