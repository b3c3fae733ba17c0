#ifndef SOA_SURGERY_CHECKPOINT_H_
#define SOA_SURGERY_CHECKPOINT_H_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "soa/model/model.h"

namespace soa::surgery {

// Stored parameter: 32-bit storage precision, widened to double for compute.
struct StoredTensor {
  std::vector<int64_t> shape;
  std::vector<float> values;

  bool operator==(const StoredTensor&) const = default;
};

using StoredParameters = std::map<std::string, StoredTensor>;

struct LineageEntry {
  std::string label;  // M1..M4 or a free-form tag
  std::string stage;  // pretrain | finetune | continual_pretrain | combine
  std::string data_fingerprint;
  int64_t steps = 0;
  std::vector<std::string> parent_digests;

  bool operator==(const LineageEntry&) const = default;
};

struct ModelCheckpoint {
  model::ModelConfig config;
  StoredParameters params;
  std::vector<LineageEntry> lineage;

  std::string architecture_fingerprint() const { return config.Fingerprint(); }
  // SHA-256 over architecture, parameter names, shapes, bytes and lineage.
  std::string Digest() const;
  bool HasComponent(model::Component c) const;

  bool operator==(const ModelCheckpoint&) const = default;
};

ModelCheckpoint FromModel(const model::Model& model,
                          std::vector<LineageEntry> lineage = {});
// Fresh parameter tensors; the checkpoint is not aliased.
model::Model ToModel(const ModelCheckpoint& ckpt);

// Directory holding manifest.json and weights.bin (little-endian float32
// arrays concatenated in manifest order).
void SaveCheckpoint(const ModelCheckpoint& ckpt, const std::string& dir);
// Throws IntegrityError on any digest, size or shape mismatch.
ModelCheckpoint LoadCheckpoint(const std::string& dir);

// Parameters of one component, names unchanged. Throws ContractError for an
// unknown component name.
StoredParameters ExtractComponent(const ModelCheckpoint& ckpt,
                                  const std::string& component);

// Feature encoder and quantizer from theta_donor, contextual encoder and CTC
// head from phi_donor. Lineage records both parents.
ModelCheckpoint Combine(const ModelCheckpoint& theta_donor,
                        const ModelCheckpoint& phi_donor);

// True when parent's digest is among the parents recorded by the last
// lineage entry of child.
bool IsRecordedParent(const ModelCheckpoint& child, const ModelCheckpoint& parent);

// Digest of one component's stored bytes, for freeze audits.
std::string ComponentDigest(const ModelCheckpoint& ckpt, model::Component c);
std::string ComponentDigest(const model::Model& model, model::Component c);

}  // namespace soa::surgery

#endif  // SOA_SURGERY_CHECKPOINT_H_
