#include "sesemi/model.h"

namespace sesemi::model {

std::vector<double> Model::score(const std::vector<double>& input) const {
    if (input.size() != cols)
        throw DimensionError("input length " + std::to_string(input.size()) +
                             " != model cols " + std::to_string(cols));
    std::vector<double> out(rows);
    for (size_t r = 0; r < rows; ++r) {
        double acc = bias[r];
        const double* w = weights.data() + r * cols;
        for (size_t c = 0; c < cols; ++c) acc += w[c] * input[c];
        out[r] = acc;
    }
    return out;
}

Model make_demo_model(const std::string& model_id, size_t rows, size_t cols) {
    Model m;
    m.model_id = model_id;
    m.rows = rows;
    m.cols = cols;
    m.weights.resize(rows * cols);
    m.bias.resize(rows);
    for (size_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < cols; ++c)
            m.weights[r * cols + c] = 0.125 * ((r * 31 + c * 17 + 7) % 23) - 1.0;
        m.bias[r] = 0.0625 * static_cast<double>(r);
    }
    return m;
}

Bytes serialize_weights(const Model& m) {
    if (m.bias.size() != m.rows || m.weights.size() != m.rows * m.cols)
        throw ModelFormatError("inconsistent model dimensions");
    Bytes out;
    put_u32_be(out, static_cast<uint32_t>(m.rows));
    put_u32_be(out, static_cast<uint32_t>(m.cols));
    for (double w : m.weights) put_f64_le(out, w);
    for (double b : m.bias) put_f64_le(out, b);
    return out;
}

Model deserialize_weights(const std::string& model_id, ByteView payload) {
    try {
        ByteReader r(payload);
        Model m;
        m.model_id = model_id;
        m.rows = r.u32_be();
        m.cols = r.u32_be();
        size_t need = (m.rows * m.cols + m.rows) * 8;
        if (r.remaining() != need) throw ModelFormatError("model payload size mismatch");
        m.weights.resize(m.rows * m.cols);
        for (double& w : m.weights) w = r.f64_le();
        m.bias.resize(m.rows);
        for (double& b : m.bias) b = r.f64_le();
        return m;
    } catch (const std::out_of_range&) {
        throw ModelFormatError("truncated model payload");
    }
}

std::string model_aad(const std::string& model_id) {
    return "model|" + model_id;
}

static const char kMagic[4] = {'S', 'S', 'M', 'I'};

Bytes encode_model_file(const Model& m, const SymKey& model_key,
                        crypto::NonceSequence& nonces) {
    AeadEnvelope env = crypto::aead_encrypt(model_key, serialize_weights(m),
                                            to_bytes(model_aad(m.model_id)), nonces);
    Bytes out;
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(0x01);
    put_u16_be(out, static_cast<uint16_t>(m.model_id.size()));
    append(out, m.model_id);
    append(out, env.serialize());
    return out;
}

ModelFile decode_model_file(ByteView file) {
    try {
        ByteReader r(file);
        Bytes magic = r.take(4);
        if (std::memcmp(magic.data(), kMagic, 4) != 0) throw ModelFormatError("bad magic");
        Bytes ver = r.take(1);
        if (ver[0] != 0x01) throw ModelFormatError("unsupported version");
        uint16_t idlen = r.u16_be();
        ModelFile mf;
        mf.model_id = to_string(r.take(idlen));
        mf.envelope = AeadEnvelope::deserialize(r.take(r.remaining()));
        return mf;
    } catch (const std::out_of_range&) {
        throw ModelFormatError("truncated model file");
    }
}

Model decrypt_model(const ModelFile& file, const SymKey& model_key) {
    Bytes plain = crypto::aead_decrypt(model_key, file.envelope,
                                       to_bytes(model_aad(file.model_id)));
    return deserialize_weights(file.model_id, plain);
}

Bytes encode_input(const std::vector<double>& values) {
    Bytes out;
    put_u32_le(out, static_cast<uint32_t>(values.size()));
    for (double v : values) put_f64_le(out, v);
    return out;
}

std::vector<double> decode_input(ByteView payload) {
    try {
        ByteReader r(payload);
        uint32_t n = r.u32_le();
        if (r.remaining() != static_cast<size_t>(n) * 8)
            throw ModelFormatError("input length mismatch");
        std::vector<double> out(n);
        for (double& v : out) v = r.f64_le();
        return out;
    } catch (const std::out_of_range&) {
        throw ModelFormatError("truncated input");
    }
}

Bytes InferenceResult::serialize() const {
    Bytes out;
    put_u32_le(out, argmax);
    put_u32_le(out, static_cast<uint32_t>(scores.size()));
    for (double s : scores) put_f64_le(out, s);
    return out;
}

InferenceResult InferenceResult::deserialize(ByteView payload) {
    try {
        ByteReader r(payload);
        InferenceResult res;
        res.argmax = r.u32_le();
        uint32_t n = r.u32_le();
        if (r.remaining() != static_cast<size_t>(n) * 8)
            throw ModelFormatError("result length mismatch");
        res.scores.resize(n);
        for (double& s : res.scores) s = r.f64_le();
        return res;
    } catch (const std::out_of_range&) {
        throw ModelFormatError("truncated result");
    }
}

}  // namespace sesemi::model
