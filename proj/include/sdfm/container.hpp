#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdfm/flow.hpp"
#include "sdfm/semidual.hpp"

namespace sdfm {

/// Binary artifact file:
///   "SDFM" | u32 version | u32 kind | u64 metadata length | metadata JSON | payload
/// All integers and array elements are little-endian. The metadata lists the
/// arrays (name, dtype, shape) in payload order plus a payload fingerprint.
inline constexpr std::uint32_t kContainerVersion = 1;

enum class ContainerKind : std::uint32_t { Dataset = 0, Potential = 1, Model = 2, Projection = 3 };

std::string to_string(ContainerKind k);

enum class DType { F32, F64 };

struct Array {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::size_t> shape;
  std::vector<double> data;  // f32 arrays hold exactly representable values

  std::size_t count() const;
};

struct Container {
  ContainerKind kind = ContainerKind::Dataset;
  nlohmann::json meta = nlohmann::json::object();  // user metadata, without the array table
  std::vector<Array> arrays;

  const Array* find(const std::string& name) const;
  const Array& get(const std::string& name) const;
  void add(std::string name, std::vector<std::size_t> shape, std::vector<double> data, DType dtype = DType::F64);
  void add(std::string name, const DenseMatrix& m, DType dtype = DType::F64);
};

std::vector<std::uint8_t> encode_container(const Container& c);
/// Throws FormatError on bad magic, version mismatch, truncation or a
/// fingerprint mismatch.
Container decode_container(const std::vector<std::uint8_t>& bytes);

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);
/// Reads and checks the kind tag.
Container read_container(const std::string& path, ContainerKind expected);

DenseMatrix array_to_matrix(const Array& a);

struct Dataset {
  DenseMatrix points;
  std::optional<DenseMatrix> conditions;
  std::vector<double> weights;  // empty = uniform
};

Container dataset_container(const Dataset& d);
Dataset dataset_from_container(const Container& c);

nlohmann::json cost_to_json(const CostConfig& cost);
/// The projection is not part of the JSON; pass it separately.
CostConfig cost_from_json(const nlohmann::json& j, std::optional<ProjectionMatrix> projection);

void add_projection(Container& c, const ProjectionMatrix& p, const std::string& prefix);
std::optional<ProjectionMatrix> projection_from(const Container& c, const std::string& prefix);

Container projection_container(const ProjectionMatrix& p);

Container potential_container(const Potential& pot);
Potential potential_from_container(const Container& c);

Container model_container(const FlowModel& model, const nlohmann::json& extra = nlohmann::json::object());
FlowModel model_from_container(const Container& c);

}  // namespace sdfm
