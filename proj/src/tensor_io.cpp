#include "periloom/tensor_io.hpp"

#include <bit>
#include <cstring>

#include "periloom/io.hpp"

namespace periloom::tensor_io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

const char* to_string(DType d) { return d == DType::F32 ? "f32" : "f64"; }

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

namespace {

DType dtype_from_string(const std::string& s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    throw FormatError("container: unknown dtype '" + s + "'");
}

template <class U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

class Reader {
public:
    explicit Reader(std::string_view b) : bytes_(b) {}

    std::string_view take(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n)
            throw TruncatedError(std::string("container: truncated while reading ") + what);
        auto v = bytes_.substr(pos_, n);
        pos_ += n;
        return v;
    }
    template <class U>
    U read(const char* what) {
        U v;
        std::memcpy(&v, take(sizeof(U), what).data(), sizeof(U));
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::size_t Tensor::numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

template <class T>
void Container::add(const std::string& name, std::vector<std::int64_t> shape, std::span<const T> values) {
    Tensor t;
    t.name = name;
    t.dtype = dtype_of<T>();
    t.shape = std::move(shape);
    if (t.numel() != values.size())
        throw ShapeError("container: tensor '" + name + "' shape does not match value count");
    if (has(name)) throw FormatError("container: duplicate tensor '" + name + "'");
    t.bytes.assign(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(T));
    tensors_.push_back(std::move(t));
}

bool Container::has(const std::string& name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return true;
    return false;
}

const Tensor& Container::tensor(const std::string& name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return t;
    throw ShapeError("container: missing tensor '" + name + "'");
}

template <class T>
std::vector<T> Container::get(const std::string& name, const std::vector<std::int64_t>& expected_shape) const {
    const auto& t = tensor(name);
    if (!expected_shape.empty() && t.shape != expected_shape)
        throw ShapeError("container: tensor '" + name + "' has unexpected shape");
    std::vector<T> out(t.numel());
    if (t.dtype == dtype_of<T>()) {
        std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
    } else if (t.dtype == DType::F32) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            float v;
            std::memcpy(&v, t.bytes.data() + i * 4, 4);
            out[i] = static_cast<T>(v);
        }
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            double v;
            std::memcpy(&v, t.bytes.data() + i * 8, 8);
            out[i] = static_cast<T>(v);
        }
    }
    return out;
}

template void Container::add<float>(const std::string&, std::vector<std::int64_t>, std::span<const float>);
template void Container::add<double>(const std::string&, std::vector<std::int64_t>, std::span<const double>);
template std::vector<float> Container::get<float>(const std::string&, const std::vector<std::int64_t>&) const;
template std::vector<double> Container::get<double>(const std::string&, const std::vector<std::int64_t>&) const;

std::string Container::serialize() const {
    nlohmann::ordered_json header = meta;
    auto list = nlohmann::ordered_json::array();
    for (const auto& t : tensors_)
        list.push_back({{"name", t.name}, {"dtype", to_string(t.dtype)}, {"shape", t.shape}});
    header["tensors"] = std::move(list);
    const std::string h = header.dump();
    const std::string p = provenance.dump();

    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, h.size());
    out += h;
    for (const auto& t : tensors_) out += t.bytes;
    put<std::uint64_t>(out, p.size());
    out += p;
    return out;
}

Container Container::deserialize(std::string_view bytes) {
    Reader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("container: bad magic bytes (not a PLTC file)");
    r.take(4, "magic");
    const auto version = r.read<std::uint32_t>("version");
    if (version != kVersion)
        throw VersionError("container: version " + std::to_string(version) + " unsupported (expected " +
                           std::to_string(kVersion) + ")");
    const auto hlen = r.read<std::uint64_t>("header length");
    const auto hbytes = r.take(hlen, "header");

    Container c;
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(hbytes);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("container: malformed header JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array())
        throw FormatError("container: header lacks a tensors array");
    for (const auto& jt : header["tensors"]) {
        Tensor t;
        try {
            t.name = jt.at("name").get<std::string>();
            t.dtype = dtype_from_string(jt.at("dtype").get<std::string>());
            t.shape = jt.at("shape").get<std::vector<std::int64_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("container: bad tensor entry: ") + e.what());
        }
        for (auto d : t.shape)
            if (d < 0) throw ShapeError("container: negative dimension in '" + t.name + "'");
        t.bytes = std::string(r.take(t.numel() * dtype_size(t.dtype), "tensor payload"));
        c.tensors_.push_back(std::move(t));
    }
    header.erase("tensors");
    c.meta = std::move(header);

    const auto plen = r.read<std::uint64_t>("provenance length");
    const auto pbytes = r.take(plen, "provenance");
    try {
        c.provenance = nlohmann::ordered_json::parse(pbytes);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("container: malformed provenance JSON: ") + e.what());
    }
    if (!r.done()) throw FormatError("container: trailing bytes after provenance block");
    return c;
}

void Container::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

Container Container::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

}  // namespace periloom::tensor_io
