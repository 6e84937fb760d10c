#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapagent/geo.hpp"

namespace mapagent {

enum class Split { Train, Test };
enum class Tier { Easy, Hard, Untiered };
std::string_view split_name(Split s);
std::string_view tier_name(Tier t);
Tier parse_tier(std::string_view name);

struct BenchSample {
    std::string id;
    std::filesystem::path image;
    GeoPoint truth;
    Split split = Split::Test;
    Tier tier = Tier::Untiered;
    std::string region;
    std::string source;
};

/// Manifest problem at a given 1-based line (0 when not tied to a line).
class DatasetError : public std::runtime_error {
public:
    DatasetError(std::size_t line, const std::string& message);
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class MissingImagesError : public std::runtime_error {
public:
    explicit MissingImagesError(std::vector<std::string> ids);
    [[nodiscard]] const std::vector<std::string>& ids() const noexcept { return ids_; }

private:
    std::vector<std::string> ids_;
};

/// Reads a JSON-lines manifest {id, image, lat, lon, split, tier?, region?, source?}.
/// Relative image paths resolve against the manifest's directory.
std::vector<BenchSample> load_dataset(const std::filesystem::path& manifest);

/// One manifest line per sample, images written relative to `base` when possible.
std::string dump_manifest(std::span<const BenchSample> samples, const std::filesystem::path& base);

/// model name -> sample id -> predicted point.
using ReferencePredictions = std::map<std::string, std::map<std::string, GeoPoint>>;

inline constexpr double kTierThresholdMeters = 10000.0;
inline constexpr int kTierQuorum = 2;

/// Easy when at least `quorum` models land strictly within `threshold_m`; missing predictions miss.
Tier tier_for(const GeoPoint& truth, std::span<const std::optional<GeoPoint>> predictions, double threshold_m,
              int quorum);

/// Relabels every sample as easy or hard. Throws std::invalid_argument with fewer models than quorum.
std::vector<BenchSample> tier_samples(std::span<const BenchSample> samples, const ReferencePredictions& references,
                                      double threshold_m = kTierThresholdMeters, int quorum = kTierQuorum);

struct SamplePrediction {
    std::optional<GeoPoint> point;
    std::string termination = "answered";
};

struct RunMetadata {
    std::string label;
    std::string model;
    std::string mode;
    int n = 1;
    std::string verifier;
};

struct ReportRow {
    std::string id;
    Tier tier = Tier::Untiered;
    std::optional<GeoPoint> prediction;
    double error_m = kUnscoredDistance;
    std::string termination;
};

struct LevelResult {
    std::size_t n = 0;
    std::vector<double> accuracy;
};

struct EvalReport {
    RunMetadata meta;
    GranularityLevels levels = GranularityLevels::standard();
    /// Sorted by sample id.
    std::vector<ReportRow> rows;
    LevelResult overall;
    std::map<Tier, LevelResult> tiers;
    std::map<std::string, int> terminations;
    /// Prediction ids that match no sample.
    std::vector<std::string> unmatched_ids;
};

/// Samples without a prediction score +inf with termination "missing". Throws on an empty dataset.
EvalReport evaluate(std::span<const BenchSample> samples, const std::map<std::string, SamplePrediction>& predictions,
                    RunMetadata meta, const GranularityLevels& levels = GranularityLevels::standard());

enum class ReportFormat { Markdown, Json };

inline constexpr std::string_view kReportSchema = "mapagent.report/1";

/// Renders one or more reports over the same samples as a single document.
std::string render_report(std::span<const EvalReport> reports, ReportFormat format);
std::string render_report(const EvalReport& report, ReportFormat format);

nlohmann::ordered_json report_to_json(std::span<const EvalReport> reports);
std::vector<EvalReport> reports_from_json(const nlohmann::json& doc);

}  // namespace mapagent
