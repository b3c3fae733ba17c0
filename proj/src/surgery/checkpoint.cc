#include "soa/surgery/checkpoint.h"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>

#include "soa/errors.h"
#include "soa/util/digest.h"

namespace soa::surgery {

namespace fs = std::filesystem;
using nlohmann::json;
using model::Component;

namespace {

constexpr const char* kFormat = "soa-checkpoint-1";

void AppendLe(std::vector<unsigned char>& out, std::span<const float> values) {
  out.reserve(out.size() + 4 * values.size());
  for (float v : values) {
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    out.push_back(bits & 0xff);
    out.push_back((bits >> 8) & 0xff);
    out.push_back((bits >> 16) & 0xff);
    out.push_back((bits >> 24) & 0xff);
  }
}

std::vector<unsigned char> TensorBytes(const StoredTensor& t) {
  std::vector<unsigned char> out;
  AppendLe(out, t.values);
  return out;
}

json LineageToJson(const std::vector<LineageEntry>& lineage) {
  json arr = json::array();
  for (const auto& e : lineage)
    arr.push_back({{"label", e.label},
                   {"stage", e.stage},
                   {"data_fingerprint", e.data_fingerprint},
                   {"steps", e.steps},
                   {"parent_digests", e.parent_digests}});
  return arr;
}

std::vector<LineageEntry> LineageFromJson(const json& arr) {
  std::vector<LineageEntry> out;
  for (const auto& j : arr) {
    LineageEntry e;
    e.label = j.at("label");
    e.stage = j.at("stage");
    e.data_fingerprint = j.at("data_fingerprint");
    e.steps = j.at("steps");
    e.parent_digests = j.at("parent_digests").get<std::vector<std::string>>();
    out.push_back(std::move(e));
  }
  return out;
}

std::string DigestOf(const StoredParameters& params) {
  std::vector<unsigned char> buf;
  for (const auto& [name, t] : params) {
    buf.insert(buf.end(), name.begin(), name.end());
    buf.push_back(0);
    for (int64_t d : t.shape) {
      const std::string s = std::to_string(d) + ",";
      buf.insert(buf.end(), s.begin(), s.end());
    }
    buf.push_back(0);
    AppendLe(buf, t.values);
  }
  return Sha256Hex(buf);
}

StoredParameters ComponentParams(const StoredParameters& params, Component c) {
  StoredParameters out;
  for (const auto& [name, t] : params)
    if (model::ComponentOf(name) == c) out.emplace(name, t);
  return out;
}

}  // namespace

std::string ModelCheckpoint::Digest() const {
  const std::string text = architecture_fingerprint() + "\n" + DigestOf(params) + "\n" +
                           LineageToJson(lineage).dump();
  return Sha256Hex(text);
}

bool ModelCheckpoint::HasComponent(Component c) const {
  return std::any_of(params.begin(), params.end(), [c](const auto& kv) {
    return model::ComponentOf(kv.first) == c;
  });
}

ModelCheckpoint FromModel(const model::Model& m, std::vector<LineageEntry> lineage) {
  ModelCheckpoint ckpt;
  ckpt.config = m.config();
  ckpt.lineage = std::move(lineage);
  for (const auto& [name, t] : m.params()) {
    StoredTensor s;
    s.shape = t.shape();
    s.values.resize(t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) s.values[i] = static_cast<float>(t.at(i));
    ckpt.params.emplace(name, std::move(s));
  }
  return ckpt;
}

model::Model ToModel(const ModelCheckpoint& ckpt) {
  model::ParameterMap params;
  for (const auto& [name, s] : ckpt.params)
    params[name] = ad::Tensor::Parameter(s.shape, std::vector<double>(s.values.begin(), s.values.end()));
  return model::Model(ckpt.config, std::move(params));
}

void SaveCheckpoint(const ModelCheckpoint& ckpt, const std::string& dir) {
  fs::create_directories(dir);
  std::vector<unsigned char> blob;
  json tensors = json::array();
  for (const auto& [name, t] : ckpt.params) {
    const size_t offset = blob.size();
    const auto bytes = TensorBytes(t);
    blob.insert(blob.end(), bytes.begin(), bytes.end());
    tensors.push_back({{"name", name},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"nbytes", bytes.size()},
                       {"sha256", Sha256Hex(bytes)}});
  }
  json manifest = {{"format", kFormat},
                   {"architecture", json::parse(ckpt.config.ToJson())},
                   {"architecture_fingerprint", ckpt.architecture_fingerprint()},
                   {"weights_file", "weights.bin"},
                   {"weights_sha256", Sha256Hex(blob)},
                   {"tensors", tensors},
                   {"lineage", LineageToJson(ckpt.lineage)},
                   {"checkpoint_digest", ckpt.Digest()}};

  std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
  wf.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  SOA_REQUIRE(wf.good(), Error, "failed writing weights in " + dir);
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << '\n';
  SOA_REQUIRE(mf.good(), Error, "failed writing manifest in " + dir);
}

ModelCheckpoint LoadCheckpoint(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  SOA_REQUIRE(mf.good(), IntegrityError, "no manifest.json in " + dir);
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("unreadable manifest: ") + e.what());
  }
  std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
  SOA_REQUIRE(wf.good(), IntegrityError, "no weights.bin in " + dir);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(wf)), {});

  ModelCheckpoint ckpt;
  try {
    SOA_REQUIRE(manifest.at("format") == kFormat, IntegrityError, "unknown checkpoint format");
    SOA_REQUIRE(Sha256Hex(blob) == manifest.at("weights_sha256").get<std::string>(),
                IntegrityError, "weights digest mismatch in " + dir);
    ckpt.config = model::ModelConfig::FromJson(manifest.at("architecture").dump());
    SOA_REQUIRE(ckpt.architecture_fingerprint() ==
                    manifest.at("architecture_fingerprint").get<std::string>(),
                IntegrityError, "architecture fingerprint mismatch");
    for (const auto& t : manifest.at("tensors")) {
      const std::string name = t.at("name");
      const size_t offset = t.at("offset"), nbytes = t.at("nbytes");
      StoredTensor s;
      s.shape = t.at("shape").get<std::vector<int64_t>>();
      SOA_REQUIRE(offset + nbytes <= blob.size() &&
                      static_cast<int64_t>(nbytes) == 4 * ad::NumElements(s.shape),
                  IntegrityError, "tensor " + name + " does not fit the weights blob");
      std::span<const unsigned char> bytes(blob.data() + offset, nbytes);
      SOA_REQUIRE(Sha256Hex(bytes) == t.at("sha256").get<std::string>(), IntegrityError,
                  "digest mismatch for tensor " + name);
      s.values.resize(nbytes / 4);
      for (size_t i = 0; i < s.values.size(); ++i) {
        const uint32_t bits = bytes[4 * i] | (bytes[4 * i + 1] << 8) |
                              (bytes[4 * i + 2] << 16) |
                              (static_cast<uint32_t>(bytes[4 * i + 3]) << 24);
        s.values[i] = std::bit_cast<float>(bits);
      }
      model::ComponentOf(name);
      ckpt.params.emplace(name, std::move(s));
    }
    ckpt.lineage = LineageFromJson(manifest.at("lineage"));
    SOA_REQUIRE(ckpt.Digest() == manifest.at("checkpoint_digest").get<std::string>(),
                IntegrityError, "checkpoint digest mismatch in " + dir);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed manifest: ") + e.what());
  } catch (const ContractError& e) {
    throw IntegrityError(std::string("invalid checkpoint content: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("invalid architecture: ") + e.what());
  }
  return ckpt;
}

StoredParameters ExtractComponent(const ModelCheckpoint& ckpt, const std::string& component) {
  return ComponentParams(ckpt.params, model::ComponentFromName(component));
}

ModelCheckpoint Combine(const ModelCheckpoint& theta_donor, const ModelCheckpoint& phi_donor) {
  SOA_REQUIRE(theta_donor.architecture_fingerprint() == phi_donor.architecture_fingerprint(),
              IncompatibleArchitectureError,
              "cannot combine checkpoints with different architectures");
  SOA_REQUIRE(phi_donor.HasComponent(Component::kCtcHead), ContractError,
              "contextual-encoder donor has no CTC head");

  ModelCheckpoint out;
  out.config = theta_donor.config;
  for (Component c : {Component::kFeatureEncoder, Component::kQuantizer})
    for (auto& kv : ComponentParams(theta_donor.params, c)) out.params.insert(std::move(kv));
  for (Component c : {Component::kContextualEncoder, Component::kCtcHead})
    for (auto& kv : ComponentParams(phi_donor.params, c)) out.params.insert(std::move(kv));

  // History of both donors, shared prefix kept once.
  out.lineage = theta_donor.lineage;
  for (const auto& e : phi_donor.lineage)
    if (std::find(out.lineage.begin(), out.lineage.end(), e) == out.lineage.end())
      out.lineage.push_back(e);
  LineageEntry entry;
  entry.label = "M4";
  entry.stage = "combine";
  entry.parent_digests = {theta_donor.Digest(), phi_donor.Digest()};
  out.lineage.push_back(std::move(entry));
  return out;
}

bool IsRecordedParent(const ModelCheckpoint& child, const ModelCheckpoint& parent) {
  if (child.lineage.empty()) return false;
  const auto& parents = child.lineage.back().parent_digests;
  return std::find(parents.begin(), parents.end(), parent.Digest()) != parents.end();
}

std::string ComponentDigest(const ModelCheckpoint& ckpt, Component c) {
  return DigestOf(ComponentParams(ckpt.params, c));
}

std::string ComponentDigest(const model::Model& m, Component c) {
  StoredParameters part;
  for (const auto& [name, t] : m.params()) {
    if (model::ComponentOf(name) != c) continue;
    StoredTensor s;
    s.shape = t.shape();
    s.values.assign(t.values().begin(), t.values().end());
    part.emplace(name, std::move(s));
  }
  return DigestOf(part);
}

}  // namespace soa::surgery
