#pragma once

#include <filesystem>

#include "json.hpp"

#include "ldm/dlm.hpp"
#include "ldm/simulate.hpp"

namespace ldm {

// JSON mirrors of the spec types. Missing keys keep their defaults; unknown
// enum strings throw FormatError.
void to_json(nlohmann::json& j, const LesionDistributionSpec& s);
void from_json(const nlohmann::json& j, LesionDistributionSpec& s);
void to_json(nlohmann::json& j, const Blob& b);
void from_json(const nlohmann::json& j, Blob& b);
void to_json(nlohmann::json& j, const SubstrateSpec& s);
void from_json(const nlohmann::json& j, SubstrateSpec& s);
void to_json(nlohmann::json& j, const NoiseModel& n);
void from_json(const nlohmann::json& j, NoiseModel& n);
void to_json(nlohmann::json& j, const DeficitModel& d);
void from_json(const nlohmann::json& j, DeficitModel& d);
void to_json(nlohmann::json& j, const DlmConfig& c);
void from_json(const nlohmann::json& j, DlmConfig& c);

std::string to_string(LabelKind k);
LabelKind label_kind_from_string(const std::string& s);

nlohmann::json read_json_file(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

/// Writes lesion_NNNNN.vol per sample, labels.csv (id,label,source_tag,split)
/// and manifest.json (dims, label kind plus `extra`).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir, const nlohmann::json& extra = {});
Dataset load_dataset(const std::filesystem::path& dir);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

} // namespace ldm
