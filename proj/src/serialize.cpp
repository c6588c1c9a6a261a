#include "csgd/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace csgd {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
    void bytes(const char* s, std::size_t n) { out_.insert(out_.end(), s, s + n); }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    void put(std::uint64_t v, int n)
    {
        for (int i = 0; i < n; ++i)
            out_.push_back(std::uint8_t(v >> (8 * i)));
    }
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::uint8_t u8() { return std::uint8_t(get(1)); }
    std::uint16_t u16() { return std::uint16_t(get(2)); }
    std::uint32_t u32() { return std::uint32_t(get(4)); }
    float f32() { return std::bit_cast<float>(std::uint32_t(get(4))); }
    void need(std::size_t n) const
    {
        if (size_ - pos_ < n)
            throw CorruptFileError("model file truncated at byte " + std::to_string(pos_));
    }
    std::size_t remaining() const { return size_ - pos_; }

private:
    std::uint64_t get(int n)
    {
        need(std::size_t(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i)
            v |= std::uint64_t(data_[pos_ + std::size_t(i)]) << (8 * i);
        pos_ += std::size_t(n);
        return v;
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

std::uint32_t checksum(const std::uint8_t* data, std::size_t n)
{
    return std::uint32_t(::crc32(::crc32(0L, Z_NULL, 0), data, uInt(n)));
}

void write_vector(Writer& w, const std::vector<float>& v)
{
    for (float x : v)
        w.f32(x);
}

} // namespace

std::vector<std::uint8_t> encode_model(const Network<float>& net)
{
    Writer w;
    w.bytes("CSGD", 4);
    w.u16(kModelFormatVersion);
    w.u32(std::uint32_t(net.size()));
    for (const auto& l : net.layers()) {
        w.u8(std::uint8_t(l.kind));
        const Shape4 dims = l.parametric() ? l.params.kernel.shape() : Shape4{0, 0, 0, 0};
        for (std::size_t d : dims)
            w.u32(std::uint32_t(d));
        if (l.parametric()) {
            w.u32(std::uint32_t(l.params.stride));
            w.u32(std::uint32_t(l.params.padding));
            write_vector(w, l.params.kernel.storage());
            write_vector(w, l.params.mu);
            write_vector(w, l.params.sigma);
            write_vector(w, l.params.gamma);
            write_vector(w, l.params.beta);
        } else {
            w.u32(std::uint32_t(l.window));
            w.u32(0);
        }
    }
    w.u32(std::uint32_t(net.edges().size()));
    for (const Edge& e : net.edges()) {
        w.u32(e.producer);
        w.u32(e.consumer);
        w.u8(std::uint8_t(e.kind));
    }
    const std::uint32_t crc = checksum(w.data().data(), w.data().size());
    w.u32(crc);
    return std::move(w.data());
}

Network<float> decode_model(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < 4 + 2 + 4 + 4 + 4 || std::memcmp(bytes.data(), "CSGD", 4) != 0)
        throw CorruptFileError("not a model file (bad magic)");
    const std::size_t body = bytes.size() - 4;
    Reader tail(bytes.data() + body, 4);
    if (tail.u32() != checksum(bytes.data(), body))
        throw CorruptFileError("model file checksum mismatch");
    Reader r(bytes.data() + 4, body - 4);
    const std::uint16_t version = r.u16();
    if (version != kModelFormatVersion)
        throw CorruptFileError("unsupported model format version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    std::vector<Layer<float>> layers;
    for (std::uint32_t i = 0; i < count; ++i) {
        Layer<float> l;
        const std::uint8_t kind = r.u8();
        if (kind > std::uint8_t(OpKind::GlobalAvgPool))
            throw CorruptFileError("unknown op kind " + std::to_string(kind) + " at layer " + std::to_string(i));
        l.kind = OpKind(kind);
        Shape4 dims{};
        for (auto& d : dims)
            d = r.u32();
        const std::uint32_t stride = r.u32(), padding = r.u32();
        if (l.parametric()) {
            const std::size_t k = dims[0] * dims[1] * dims[2] * dims[3];
            r.need((k + 4 * dims[3]) * 4);
            std::vector<float> kernel(k);
            for (auto& v : kernel)
                v = r.f32();
            l.params.kernel = Tensor4<float>(dims, std::move(kernel));
            for (auto* v : {&l.params.mu, &l.params.sigma, &l.params.gamma, &l.params.beta}) {
                v->resize(dims[3]);
                for (auto& x : *v)
                    x = r.f32();
            }
            l.params.stride = stride;
            l.params.padding = padding;
        } else {
            l.window = stride;
        }
        layers.push_back(std::move(l));
    }
    const std::uint32_t n_edges = r.u32();
    r.need(std::size_t(n_edges) * 9);
    std::vector<Edge> edges;
    for (std::uint32_t i = 0; i < n_edges; ++i) {
        Edge e{};
        e.producer = r.u32();
        e.consumer = r.u32();
        const std::uint8_t kind = r.u8();
        if (kind > std::uint8_t(Combine::DenseConcat))
            throw CorruptFileError("unknown edge kind " + std::to_string(kind));
        e.kind = Combine(kind);
        edges.push_back(e);
    }
    if (r.remaining() != 0)
        throw CorruptFileError("trailing bytes after edge list");
    try {
        return Network<float>(std::move(layers), std::move(edges));
    } catch (const CorruptFileError&) {
        throw;
    } catch (const Error& e) {
        throw CorruptFileError(std::string("model file describes an invalid network: ") + e.what());
    }
}

void save_model(const std::string& path, const Network<float>& net)
{
    const auto bytes = encode_model(net);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw InputError("cannot write model file '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out)
        throw InputError("failed writing model file '" + path + "'");
}

Network<float> load_model(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw InputError("cannot open model file '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_model(bytes);
}

} // namespace csgd
