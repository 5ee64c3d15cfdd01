#pragma once

#include <string>
#include <vector>

#include "sesemi/crypto.h"

namespace sesemi::model {

using crypto::AeadEnvelope;
using crypto::SymKey;

struct ModelFormatError : std::runtime_error {
    explicit ModelFormatError(const std::string& what) : std::runtime_error(what) {}
};

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

/// Linear scorer: scores = W x + b, W is rows x cols.
struct Model {
    std::string model_id;
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> weights;  // row-major
    std::vector<double> bias;
    uint64_t declared_size_bytes = 0;

    std::vector<double> score(const std::vector<double>& input) const;
};

/// Deterministic filler weights; used by the simulator and the demo CLI.
Model make_demo_model(const std::string& model_id, size_t rows, size_t cols);

/// Payload inside the model envelope:
/// u32 rows || u32 cols || row-major f64-LE weights || f64-LE bias.
Bytes serialize_weights(const Model& m);
Model deserialize_weights(const std::string& model_id, ByteView payload);

/// AAD bound into encrypted model files.
std::string model_aad(const std::string& model_id);

/// Model file: "SSMI" || 0x01 || u16-BE id length || id || envelope wire.
Bytes encode_model_file(const Model& m, const SymKey& model_key,
                        crypto::NonceSequence& nonces);
struct ModelFile {
    std::string model_id;
    AeadEnvelope envelope;
};
ModelFile decode_model_file(ByteView file);
Model decrypt_model(const ModelFile& file, const SymKey& model_key);

/// Request plaintext: u32-LE count || f64-LE values.
Bytes encode_input(const std::vector<double>& values);
std::vector<double> decode_input(ByteView payload);

/// Result plaintext: u32-LE argmax || u32-LE count || f64-LE scores.
struct InferenceResult {
    uint32_t argmax = 0;
    std::vector<double> scores;

    Bytes serialize() const;
    static InferenceResult deserialize(ByteView payload);
};

}  // namespace sesemi::model
