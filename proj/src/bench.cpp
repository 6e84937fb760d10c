#include "mapagent/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace mapagent {

std::string_view split_name(Split s) { return s == Split::Train ? "train" : "test"; }

std::string_view tier_name(Tier t) {
    switch (t) {
        case Tier::Easy:
            return "easy";
        case Tier::Hard:
            return "hard";
        case Tier::Untiered:
            return "untiered";
    }
    return "untiered";
}

Tier parse_tier(std::string_view name) {
    if (name == "easy") {
        return Tier::Easy;
    }
    if (name == "hard") {
        return Tier::Hard;
    }
    if (name == "untiered") {
        return Tier::Untiered;
    }
    throw std::invalid_argument("unknown tier '" + std::string(name) + "'");
}

DatasetError::DatasetError(std::size_t line, const std::string& message)
    : std::runtime_error(line > 0 ? "manifest line " + std::to_string(line) + ": " + message : message),
      line_(line) {}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        out += (out.empty() ? "" : ", ") + id;
    }
    return out;
}

}  // namespace

MissingImagesError::MissingImagesError(std::vector<std::string> ids)
    : std::runtime_error("missing images for samples: " + join_ids(ids)), ids_(std::move(ids)) {}

std::vector<BenchSample> load_dataset(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) {
        throw DatasetError(0, "cannot open manifest " + manifest.string());
    }
    const auto base = manifest.parent_path();
    std::vector<BenchSample> samples;
    std::set<std::string> seen;
    std::vector<std::string> missing;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw DatasetError(lineno, "not a JSON object");
        }
        auto text_field = [&](const char* key, bool required) -> std::string {
            if (!j.contains(key)) {
                if (required) {
                    throw DatasetError(lineno, std::string("missing field '") + key + "'");
                }
                return {};
            }
            if (!j.at(key).is_string()) {
                throw DatasetError(lineno, std::string("field '") + key + "' must be a string");
            }
            return j.at(key).get<std::string>();
        };
        auto number_field = [&](const char* key) {
            if (!j.contains(key) || !j.at(key).is_number()) {
                throw DatasetError(lineno, std::string("field '") + key + "' must be a number");
            }
            return j.at(key).get<double>();
        };

        const std::string id = text_field("id", true);
        if (id.empty()) {
            throw DatasetError(lineno, "empty id");
        }
        if (!seen.insert(id).second) {
            throw DatasetError(lineno, "duplicate id '" + id + "'");
        }
        const double lat = number_field("lat");
        const double lon = number_field("lon");
        std::optional<GeoPoint> truth;
        try {
            truth.emplace(lat, lon);
        } catch (const std::invalid_argument& e) {
            throw DatasetError(lineno, "sample '" + id + "': " + e.what());
        }

        BenchSample s{id, text_field("image", true), *truth, Split::Test, Tier::Untiered, {}, {}};
        if (s.image.is_relative()) {
            s.image = base / s.image;
        }
        const std::string split = text_field("split", true);
        if (split == "train") {
            s.split = Split::Train;
        } else if (split != "test") {
            throw DatasetError(lineno, "split must be 'train' or 'test'");
        }
        if (const auto tier = text_field("tier", false); !tier.empty()) {
            try {
                s.tier = parse_tier(tier);
            } catch (const std::invalid_argument& e) {
                throw DatasetError(lineno, e.what());
            }
        }
        s.region = text_field("region", false);
        s.source = text_field("source", false);

        std::error_code ec;
        if (!std::filesystem::is_regular_file(s.image, ec)) {
            missing.push_back(id);
        }
        samples.push_back(std::move(s));
    }
    if (!missing.empty()) {
        throw MissingImagesError(std::move(missing));
    }
    return samples;
}

std::string dump_manifest(std::span<const BenchSample> samples, const std::filesystem::path& base) {
    std::string out;
    for (const auto& s : samples) {
        nlohmann::ordered_json j;
        j["id"] = s.id;
        auto rel = s.image.lexically_relative(base);
        j["image"] = (rel.empty() || rel.native().starts_with("..") ? s.image : rel).generic_string();
        j["lat"] = s.truth.lat();
        j["lon"] = s.truth.lon();
        j["split"] = split_name(s.split);
        j["tier"] = tier_name(s.tier);
        if (!s.region.empty()) {
            j["region"] = s.region;
        }
        if (!s.source.empty()) {
            j["source"] = s.source;
        }
        out += j.dump() + "\n";
    }
    return out;
}

Tier tier_for(const GeoPoint& truth, std::span<const std::optional<GeoPoint>> predictions, double threshold_m,
              int quorum) {
    int hits = 0;
    for (const auto& p : predictions) {
        if (p && geodesic_distance(*p, truth) < threshold_m) {
            ++hits;
        }
    }
    return hits >= quorum ? Tier::Easy : Tier::Hard;
}

std::vector<BenchSample> tier_samples(std::span<const BenchSample> samples, const ReferencePredictions& references,
                                      double threshold_m, int quorum) {
    if (quorum < 1) {
        throw std::invalid_argument("quorum must be at least 1");
    }
    if (static_cast<int>(references.size()) < quorum) {
        throw std::invalid_argument("tiering needs at least " + std::to_string(quorum) + " reference models, got " +
                                    std::to_string(references.size()));
    }
    std::vector<BenchSample> out(samples.begin(), samples.end());
    for (auto& s : out) {
        std::vector<std::optional<GeoPoint>> preds;
        for (const auto& [model, by_id] : references) {
            const auto it = by_id.find(s.id);
            preds.push_back(it == by_id.end() ? std::nullopt : std::optional<GeoPoint>(it->second));
        }
        s.tier = tier_for(s.truth, preds, threshold_m, quorum);
    }
    return out;
}

namespace {

LevelResult level_result(const std::vector<double>& errors, const GranularityLevels& levels) {
    return {errors.size(), accuracy_profile(errors, levels)};
}

}  // namespace

EvalReport evaluate(std::span<const BenchSample> samples, const std::map<std::string, SamplePrediction>& predictions,
                    RunMetadata meta, const GranularityLevels& levels) {
    if (samples.empty()) {
        throw std::invalid_argument("cannot evaluate an empty dataset");
    }
    EvalReport report{std::move(meta), levels, {}, {}, {}, {}, {}};
    std::set<std::string> ids;
    for (const auto& s : samples) {
        ids.insert(s.id);
        ReportRow row{s.id, s.tier, std::nullopt, kUnscoredDistance, "missing"};
        if (const auto it = predictions.find(s.id); it != predictions.end()) {
            row.prediction = it->second.point;
            row.termination = it->second.termination;
            if (row.prediction) {
                row.error_m = geodesic_distance(*row.prediction, s.truth);
            }
        }
        report.rows.push_back(std::move(row));
    }
    for (const auto& [id, _] : predictions) {
        if (!ids.contains(id)) {
            report.unmatched_ids.push_back(id);
        }
    }
    std::sort(report.rows.begin(), report.rows.end(),
              [](const ReportRow& a, const ReportRow& b) { return a.id < b.id; });

    std::vector<double> all;
    std::map<Tier, std::vector<double>> by_tier;
    for (const auto& row : report.rows) {
        all.push_back(row.error_m);
        by_tier[row.tier].push_back(row.error_m);
        ++report.terminations[row.termination];
    }
    report.overall = level_result(all, levels);
    for (const auto& [tier, errs] : by_tier) {
        report.tiers[tier] = level_result(errs, levels);
    }
    return report;
}

namespace {

std::string percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
    return buf;
}

std::string title_case(std::string_view s) {
    std::string out(s);
    if (!out.empty()) {
        out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    }
    return out;
}

void table(std::ostringstream& out, std::span<const EvalReport> reports, const GranularityLevels& levels,
           const std::function<const LevelResult*(const EvalReport&)>& pick) {
    out << "| Method |";
    for (std::size_t i = 0; i < levels.size(); ++i) {
        out << ' ' << levels.label(i) << " |";
    }
    out << "\n|---|";
    for (std::size_t i = 0; i < levels.size(); ++i) {
        out << "---:|";
    }
    out << '\n';
    for (const auto& r : reports) {
        const LevelResult* res = pick(r);
        out << "| " << r.meta.label << " |";
        for (std::size_t i = 0; i < levels.size(); ++i) {
            out << ' ' << (res != nullptr ? percent(res->accuracy[i]) : std::string("-")) << " |";
        }
        out << '\n';
    }
}

std::string render_markdown(std::span<const EvalReport> reports) {
    const EvalReport& head = reports.front();
    std::ostringstream out;
    out << "# Evaluation report\n\n";
    out << "- model: " << (head.meta.model.empty() ? "-" : head.meta.model) << '\n';
    out << "- mode: " << (head.meta.mode.empty() ? "-" : head.meta.mode) << '\n';
    out << "- N: " << head.meta.n << '\n';
    if (!head.meta.verifier.empty()) {
        out << "- verifier: " << head.meta.verifier << '\n';
    }
    out << "- samples: " << head.rows.size() << "\n\n";
    out << "Accuracy (%) by distance threshold.\n\n";

    std::vector<Tier> tiers;
    for (const auto& [tier, _] : head.tiers) {
        tiers.push_back(tier);
    }
    if (tiers.size() == 1) {
        out << "## " << title_case(tier_name(tiers.front())) << " (n=" << head.overall.n << ")\n\n";
        table(out, reports, head.levels, [](const EvalReport& r) { return &r.overall; });
    } else {
        out << "## Overall (n=" << head.overall.n << ")\n\n";
        table(out, reports, head.levels, [](const EvalReport& r) { return &r.overall; });
        for (Tier t : tiers) {
            out << "\n## " << title_case(tier_name(t)) << " (n=" << head.tiers.at(t).n << ")\n\n";
            table(out, reports, head.levels, [t](const EvalReport& r) -> const LevelResult* {
                const auto it = r.tiers.find(t);
                return it == r.tiers.end() ? nullptr : &it->second;
            });
        }
    }

    std::set<std::string> statuses;
    for (const auto& r : reports) {
        for (const auto& [k, _] : r.terminations) {
            statuses.insert(k);
        }
    }
    out << "\n## Terminations\n\n| Method |";
    for (const auto& s : statuses) {
        out << ' ' << s << " |";
    }
    out << "\n|---|";
    for (std::size_t i = 0; i < statuses.size(); ++i) {
        out << "---:|";
    }
    out << '\n';
    for (const auto& r : reports) {
        out << "| " << r.meta.label << " |";
        for (const auto& s : statuses) {
            const auto it = r.terminations.find(s);
            out << ' ' << (it == r.terminations.end() ? 0 : it->second) << " |";
        }
        out << '\n';
    }
    for (const auto& r : reports) {
        if (!r.unmatched_ids.empty()) {
            out << "\nUnmatched prediction ids (" << r.meta.label << "): " << join_ids(r.unmatched_ids) << '\n';
        }
    }
    return out.str();
}

nlohmann::ordered_json level_json(const LevelResult& r) {
    return {{"n", r.n}, {"accuracy", r.accuracy}};
}

LevelResult level_from_json(const nlohmann::json& j) {
    return {j.at("n").get<std::size_t>(), j.at("accuracy").get<std::vector<double>>()};
}

}  // namespace

nlohmann::ordered_json report_to_json(std::span<const EvalReport> reports) {
    if (reports.empty()) {
        throw std::invalid_argument("no report to render");
    }
    nlohmann::ordered_json doc;
    doc["schema"] = kReportSchema;
    auto levels = nlohmann::ordered_json::array();
    for (const auto& g : reports.front().levels.levels()) {
        levels.push_back({{"name", g.name}, {"threshold_m", g.threshold_m}});
    }
    doc["levels"] = std::move(levels);
    auto list = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json j;
        j["label"] = r.meta.label;
        j["model"] = r.meta.model;
        j["mode"] = r.meta.mode;
        j["n"] = r.meta.n;
        j["verifier"] = r.meta.verifier;
        j["overall"] = level_json(r.overall);
        nlohmann::ordered_json tiers = nlohmann::ordered_json::object();
        for (const auto& [t, res] : r.tiers) {
            tiers[std::string(tier_name(t))] = level_json(res);
        }
        j["tiers"] = std::move(tiers);
        nlohmann::ordered_json terms = nlohmann::ordered_json::object();
        for (const auto& [k, v] : r.terminations) {
            terms[k] = v;
        }
        j["terminations"] = std::move(terms);
        auto rows = nlohmann::ordered_json::array();
        for (const auto& row : r.rows) {
            nlohmann::ordered_json jr;
            jr["id"] = row.id;
            jr["tier"] = tier_name(row.tier);
            if (row.prediction) {
                jr["prediction"] = {{"lat", row.prediction->lat()}, {"lon", row.prediction->lon()}};
            } else {
                jr["prediction"] = nullptr;
            }
            jr["error_m"] = std::isfinite(row.error_m) ? nlohmann::ordered_json(row.error_m) : nlohmann::ordered_json();
            jr["termination"] = row.termination;
            rows.push_back(std::move(jr));
        }
        j["rows"] = std::move(rows);
        j["unmatched_ids"] = r.unmatched_ids;
        list.push_back(std::move(j));
    }
    doc["reports"] = std::move(list);
    return doc;
}

std::vector<EvalReport> reports_from_json(const nlohmann::json& doc) {
    if (doc.value("schema", "") != kReportSchema) {
        throw std::invalid_argument("not a report document");
    }
    std::vector<Granularity> levels;
    for (const auto& g : doc.at("levels")) {
        levels.push_back({g.at("name").get<std::string>(), g.at("threshold_m").get<double>()});
    }
    std::vector<EvalReport> out;
    for (const auto& j : doc.at("reports")) {
        EvalReport r{RunMetadata{j.at("label").get<std::string>(), j.value("model", ""), j.value("mode", ""),
                                 j.value("n", 1), j.value("verifier", "")},
                     GranularityLevels(levels),
                     {},
                     level_from_json(j.at("overall")),
                     {},
                     {},
                     j.value("unmatched_ids", std::vector<std::string>{})};
        for (const auto& [k, v] : j.at("tiers").items()) {
            r.tiers[parse_tier(k)] = level_from_json(v);
        }
        for (const auto& [k, v] : j.at("terminations").items()) {
            r.terminations[k] = v.get<int>();
        }
        for (const auto& jr : j.at("rows")) {
            ReportRow row{jr.at("id").get<std::string>(), parse_tier(jr.at("tier").get<std::string>()), std::nullopt,
                          kUnscoredDistance, jr.value("termination", "")};
            if (const auto& p = jr.at("prediction"); !p.is_null()) {
                row.prediction.emplace(p.at("lat").get<double>(), p.at("lon").get<double>());
            }
            if (const auto& e = jr.at("error_m"); !e.is_null()) {
                row.error_m = e.get<double>();
            }
            r.rows.push_back(std::move(row));
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::string render_report(std::span<const EvalReport> reports, ReportFormat format) {
    if (reports.empty()) {
        throw std::invalid_argument("no report to render");
    }
    if (format == ReportFormat::Json) {
        return report_to_json(reports).dump(2) + "\n";
    }
    return render_markdown(reports);
}

std::string render_report(const EvalReport& report, ReportFormat format) {
    return render_report(std::span<const EvalReport>(&report, 1), format);
}

}  // namespace mapagent
