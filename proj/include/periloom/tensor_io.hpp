#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "periloom/error.hpp"

/// Binary tensor container shared by every checkpoint-like artifact.
///
/// Layout (little-endian):
///   "PLTC" | u32 version | u64 header_len | header JSON
///   | tensor payloads in header order | u64 provenance_len | provenance JSON
///
/// The header is a JSON object whose "tensors" array lists {name, dtype, shape};
/// every other header key is free-form metadata owned by the writer.
namespace periloom::tensor_io {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr char kMagic[4] = {'P', 'L', 'T', 'C'};

class FormatError : public Error {
public:
    using Error::Error;
    const char* category() const noexcept override { return "data"; }
};
class VersionError : public Error {
public:
    using Error::Error;
    const char* category() const noexcept override { return "compat"; }
};
class TruncatedError : public Error {
public:
    using Error::Error;
    const char* category() const noexcept override { return "data"; }
};
class ShapeError : public Error {
public:
    using Error::Error;
    const char* category() const noexcept override { return "data"; }
};

enum class DType { F32, F64 };
const char* to_string(DType d);
std::size_t dtype_size(DType d);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

struct Tensor {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::string bytes;  // raw little-endian payload

    std::size_t numel() const;
};

class Container {
public:
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

    template <class T>
    void add(const std::string& name, std::vector<std::int64_t> shape, std::span<const T> values);

    bool has(const std::string& name) const;
    const Tensor& tensor(const std::string& name) const;
    const std::vector<Tensor>& tensors() const { return tensors_; }

    /// Converts to T when the stored dtype differs. Throws ShapeError when the
    /// stored shape is not `expected_shape` (skip the check with an empty shape).
    template <class T>
    std::vector<T> get(const std::string& name, const std::vector<std::int64_t>& expected_shape = {}) const;

    std::string serialize() const;
    static Container deserialize(std::string_view bytes);

    void save(const std::filesystem::path& path) const;
    static Container load(const std::filesystem::path& path);

private:
    std::vector<Tensor> tensors_;
};

}  // namespace periloom::tensor_io
