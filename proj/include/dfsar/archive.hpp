#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfsar/nn.hpp"

namespace dfsar::io {

/// Single-file container: a JSON manifest plus named double arrays.
struct Archive {
  nlohmann::json manifest = nlohmann::json::object();
  std::map<std::string, Tensor> arrays;
};

std::vector<std::uint8_t> serialize(const Archive& a);
/// Throws ValidationError on a bad magic number or truncated data.
Archive deserialize(const std::vector<std::uint8_t>& bytes);

/// Written to a temporary sibling and renamed into place.
void save_archive(const std::string& path, const Archive& a);
/// `asset` names the file in the MissingAssetError raised when it is absent.
Archive load_archive(const std::string& path, const std::string& asset);

/// Stores every parameter and buffer under `prefix` + name.
void put_parameters(Archive& a, const std::string& prefix, const nn::ParameterSet& ps);
/// Restores parameters and buffers; every name and shape must match exactly.
void get_parameters(const Archive& a, const std::string& prefix, nn::ParameterSet& ps);

void put_tensor_map(Archive& a, const std::string& prefix, const std::map<std::string, Tensor>& m);
void get_tensor_map(const Archive& a, const std::string& prefix, std::map<std::string, Tensor>& m);

// ---------------------------------------------------------------- hashing

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& text);
/// Throws MissingAssetError(asset) if the file cannot be read.
std::string sha256_file(const std::string& path, const std::string& asset = "file");

std::vector<std::uint8_t> read_bytes(const std::string& path, const std::string& asset);
void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace dfsar::io
