// Copyright 2026 The quantlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#include "quantlab/harness/checkpoint.hpp"

#include "quantlab/error.hpp"
#include "quantlab/quant/quant.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace quantlab {

namespace {

constexpr std::array<char, 4> kMagic{'Q', 'L', 'A', 'B'};
constexpr std::uint8_t kTensorF32 = 0;
constexpr std::uint8_t kTensorPacked = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
public:
    template <typename T>
    void put(T v)
    {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n)
    {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }
    void put_string(const std::string& s)
    {
        put(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t> bytes;
};

class Cursor {
public:
    Cursor(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    template <typename T>
    T get()
    {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    const std::uint8_t* take(std::size_t n)
    {
        if (n > size_ - pos_)
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
        const auto* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    std::string get_string()
    {
        const auto n = get<std::uint32_t>();
        const auto* p = take(n);
        return {reinterpret_cast<const char*>(p), n};
    }
    bool done() const { return pos_ == size_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

void put_config(Writer& w, const ModelConfig& c)
{
    Writer block;
    for (int v : {c.n_layer, c.n_head, c.d_hidden, c.d_inter, c.vocab_size, c.max_seq_len})
        block.put(static_cast<std::int32_t>(v));
    block.put(static_cast<std::uint8_t>(c.use_rms_norm_before_linear));
    w.put(static_cast<std::uint32_t>(block.bytes.size()));
    w.put_bytes(block.bytes.data(), block.bytes.size());
}

ModelConfig get_config(Cursor& r)
{
    const auto size = r.get<std::uint32_t>();
    Cursor block(r.take(size), size);
    ModelConfig c;
    c.n_layer = block.get<std::int32_t>();
    c.n_head = block.get<std::int32_t>();
    c.d_hidden = block.get<std::int32_t>();
    c.d_inter = block.get<std::int32_t>();
    c.vocab_size = block.get<std::int32_t>();
    c.max_seq_len = block.get<std::int32_t>();
    c.use_rms_norm_before_linear = block.get<std::uint8_t>() != 0;
    if (!block.done())
        throw FormatError("checkpoint model block has trailing bytes");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint model block is invalid: ") + e.what());
    }
    return c;
}

void put_shape(Writer& w, const Shape& shape)
{
    w.put(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape)
        w.put(static_cast<std::int64_t>(d));
}

Shape get_shape(Cursor& r)
{
    const auto rank = r.get<std::uint8_t>();
    Shape shape;
    for (int i = 0; i < rank; ++i) {
        const auto d = r.get<std::int64_t>();
        if (d < 0 || d > (std::int64_t{1} << 40))
            throw FormatError("checkpoint tensor has an invalid dimension");
        shape.push_back(d);
    }
    return shape;
}

void put_packed(Writer& w, const QuantizedLinear& q)
{
    w.put(static_cast<std::uint8_t>(q.bits));
    w.put(static_cast<std::int32_t>(q.group_size));
    w.put(static_cast<std::uint8_t>(q.axis));
    put_shape(w, q.shape);
    w.put(static_cast<std::uint32_t>(q.params.size()));
    for (const auto& p : q.params)
        w.put(p.scale);
    for (const auto& p : q.params)
        w.put(p.zero_point);
    w.put(static_cast<std::uint32_t>(q.packed.size()));
    w.put_bytes(q.packed.data(), q.packed.size());
}

QuantizedLinear get_packed(Cursor& r)
{
    QuantizedLinear q;
    q.bits = r.get<std::uint8_t>();
    q.group_size = r.get<std::int32_t>();
    const auto axis = r.get<std::uint8_t>();
    if (axis > 1)
        throw FormatError("checkpoint packed block has an unknown group axis");
    q.axis = static_cast<GroupAxis>(axis);
    q.shape = get_shape(r);
    if (q.shape.size() != 2 || q.bits < 1 || q.bits > 8 || q.group_size < 1)
        throw FormatError("checkpoint packed block header is invalid");
    const auto groups = r.get<std::uint32_t>();
    if (static_cast<std::int64_t>(groups) != q.lines() * q.groups_per_line())
        throw FormatError("checkpoint packed block group count mismatch");
    q.params.resize(groups);
    for (auto& p : q.params)
        p.scale = r.get<float>();
    for (auto& p : q.params)
        p.zero_point = r.get<std::int16_t>();
    const auto n = r.get<std::uint32_t>();
    const auto* p = r.take(n);
    q.packed.assign(p, p + n);
    // validates the code block length
    unpack_codes(q.packed, q.rows() * q.cols(), q.bits);
    return q;
}

} // namespace

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes)
{
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> serialize_checkpoint(const Model& model)
{
    Writer w;
    w.put_bytes(kMagic.data(), kMagic.size());
    w.put(kCheckpointVersion);
    put_config(w, model.config());
    w.put(static_cast<std::uint8_t>(model.precision()));
    w.put(static_cast<std::uint32_t>(model.params().size()));
    for (const auto& [name, tensor] : model.params()) {
        w.put_string(name);
        const auto q = model.quantized().find(name);
        if (q != model.quantized().end() && dequantize(*q->second).identical(tensor)) {
            w.put(kTensorPacked);
            put_packed(w, *q->second);
            continue;
        }
        w.put(kTensorF32);
        const Tensor f = tensor.cast(DType::f32);
        put_shape(w, f.shape());
        const auto data = f.data<float>();
        w.put_bytes(data.data(), data.size() * sizeof(float));
    }
    w.put(crc32_of(w.bytes));
    return std::move(w.bytes);
}

Model deserialize_checkpoint(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < kMagic.size() + 8)
        throw FormatError("checkpoint too short");
    if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
        throw FormatError("not a checkpoint: bad magic");
    const std::vector<std::uint8_t> body(bytes.begin(), bytes.end() - 4);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body.size(), 4);
    if (stored != crc32_of(body))
        throw FormatError("checkpoint checksum mismatch");

    Cursor r(body.data(), body.size());
    r.take(kMagic.size());
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const ModelConfig config = get_config(r);
    const auto precision = r.get<std::uint8_t>();
    if (precision > static_cast<std::uint8_t>(Precision::ternary))
        throw FormatError("checkpoint has an unknown precision tag");

    Model model(config, 0);
    model.set_precision(static_cast<Precision>(precision));
    const auto count = r.get<std::uint32_t>();
    if (count != model.params().size())
        throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, the model has "
                          + std::to_string(model.params().size()));
    std::set<std::string> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.get_string();
        if (!model.params().contains(name) || !loaded.insert(name).second)
            throw FormatError("checkpoint tensor '" + name + "' is unknown or repeated");
        const Shape& expected = model.param(name).shape();
        const auto kind = r.get<std::uint8_t>();
        if (kind == kTensorPacked) {
            auto q = std::make_shared<QuantizedLinear>(get_packed(r));
            if (q->shape != expected)
                throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
            model.set_param(name, dequantize(*q));
            model.set_quantized(name, std::move(q));
        } else if (kind == kTensorF32) {
            const Shape shape = get_shape(r);
            if (shape != expected)
                throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
            Tensor t(shape, DType::f32);
            auto data = t.data<float>();
            std::memcpy(data.data(), r.take(data.size() * sizeof(float)), data.size() * sizeof(float));
            model.set_param(name, std::move(t));
        } else {
            throw FormatError("checkpoint tensor '" + name + "' has unknown kind " + std::to_string(kind));
        }
    }
    if (!r.done())
        throw FormatError("checkpoint has trailing bytes");
    return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path)
{
    const auto bytes = serialize_checkpoint(model);
    const auto tmp = path.string() + ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw InputError("cannot write checkpoint " + tmp);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw InputError("short write to checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw InputError("cannot read checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

} // namespace quantlab
