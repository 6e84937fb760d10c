#include "mapagent/agent.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <sstream>

namespace mapagent {

namespace {

constexpr double kMergeRadiusMeters = 1000.0;
constexpr std::string_view kDroppedObservation = "[observation dropped to fit the context window]";
constexpr std::string_view kSkippedCall = "tool-call budget exhausted; call skipped";

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

bool is_blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

/// Largest prefix length <= n that does not split a UTF-8 sequence.
std::size_t utf8_floor(const std::string& s, std::size_t n) {
    if (n >= s.size()) {
        return s.size();
    }
    while (n > 0 && (static_cast<unsigned char>(s[n]) & 0xC0) == 0x80) {
        --n;
    }
    return n;
}

/// Cuts `text` so that prefix + text fits within max_chars, appending the truncation suffix.
bool fit(std::string& text, std::size_t overhead, std::size_t max_chars) {
    if (overhead + text.size() <= max_chars) {
        return false;
    }
    const std::size_t room = max_chars > overhead + kTruncationSuffix.size()
                                 ? max_chars - overhead - kTruncationSuffix.size()
                                 : 0;
    text.resize(utf8_floor(text, room));
    text += kTruncationSuffix;
    return true;
}

std::chrono::nanoseconds elapsed_since(Clock& clock, Clock::duration start) { return clock.now() - start; }

void drop_oldest_observations(std::vector<ChatMessage>& conversation) {
    std::vector<std::size_t> live;
    for (std::size_t i = 1; i < conversation.size(); ++i) {
        const auto& m = conversation[i];
        const bool tool_obs = m.role == Role::Tool && m.text() != kDroppedObservation;
        const bool image_attachment = m.role == Role::User && m.image_count() > 0;
        if (tool_obs || image_attachment) {
            live.push_back(i);
        }
    }
    const std::size_t n = std::max<std::size_t>(1, (live.size() + 1) / 2);
    for (std::size_t k = 0; k < std::min(n, live.size()); ++k) {
        auto& m = conversation[live[k]];
        m.content = {ContentPart::make_text(std::string(kDroppedObservation))};
    }
}

}  // namespace

EncodedImage GeoQuery::load_image() const { return load_image_file(image_path); }

void Budget::validate() const {
    if (max_turns < 1) {
        throw std::invalid_argument("max_turns must be at least 1");
    }
    if (max_tool_response_chars < 64) {
        throw std::invalid_argument("max_tool_response_chars must be at least 64");
    }
    if (wall_clock.count() <= 0) {
        throw std::invalid_argument("wall-clock budget must be positive");
    }
}

std::string_view termination_name(Termination t) {
    switch (t) {
        case Termination::Answered:
            return "answered";
        case Termination::BudgetExhausted:
            return "budget_exhausted";
        case Termination::PolicyError:
            return "policy_error";
        case Termination::Unparseable:
            return "unparseable";
    }
    return "policy_error";
}

Termination parse_termination(std::string_view name) {
    for (auto t : {Termination::Answered, Termination::BudgetExhausted, Termination::PolicyError,
                   Termination::Unparseable}) {
        if (termination_name(t) == name) {
            return t;
        }
    }
    throw std::invalid_argument("unknown termination '" + std::string(name) + "'");
}

bool truncate_observation(ToolResult& result, std::size_t max_chars) {
    bool cut = false;
    if (auto* t = std::get_if<TextPayload>(&result.body)) {
        cut = fit(t->text, 0, max_chars);
    } else if (auto* img = std::get_if<ImagePayload>(&result.body)) {
        cut = fit(img->caption, img->handle.size() + 9, max_chars);
    } else {
        auto& f = std::get<ToolFailure>(result.body);
        cut = fit(f.message, f.kind.size() + 10, max_chars);
    }
    result.truncated = result.truncated || cut;
    return cut;
}

Trajectory run_episode(const GeoQuery& query, ChatPolicy& policy, MapBackend& env, const ToolRegistry& registry,
                       const Budget& budget, const EpisodeOptions& options) {
    budget.validate();
    Clock& clock = options.clock != nullptr ? *options.clock : Clock::system();
    const auto start = clock.now();

    Trajectory traj;
    traj.query = query;
    ImageStore images;
    images.add_query(query.load_image());
    EpisodeContext ctx{images, query.region_hint};

    ChatMessage first;
    first.role = Role::User;
    first.content = {ContentPart::make_image("query"), ContentPart::make_text(query.instruction)};
    traj.conversation.push_back(std::move(first));

    const auto schemas = emit_tool_schemas(registry);
    const auto no_tools = nlohmann::ordered_json::array();

    auto finish = [&](Termination t) {
        traj.termination = t;
        traj.accounting.wall_seconds = std::chrono::duration<double>(elapsed_since(clock, start)).count();
        return std::move(traj);
    };

    for (int turn = 0;; ++turn) {
        const bool forced = turn >= budget.max_turns - 1 || elapsed_since(clock, start) >= budget.wall_clock;
        if (forced) {
            traj.conversation.push_back(ChatMessage::user(std::string(kForceAnswerInstruction)));
            traj.forced_final_turn = true;
        }

        ChatMessage reply;
        try {
            try {
                reply = policy.chat(traj.conversation, forced ? no_tools : schemas, options.sampling, &images);
            } catch (const ChatError& e) {
                if (e.kind() != ChatErrorKind::ContextLengthExceeded) {
                    throw;
                }
                drop_oldest_observations(traj.conversation);
                ++traj.accounting.context_drops;
                reply = policy.chat(traj.conversation, forced ? no_tools : schemas, options.sampling, &images);
            }
        } catch (const ChatError& e) {
            traj.error = std::string(chat_error_name(e.kind())) + ": " + e.what();
            return finish(Termination::PolicyError);
        }

        reply.role = Role::Assistant;
        ++traj.accounting.assistant_turns;
        const std::string text = reply.text();
        traj.accounting.assistant_chars += text.size();
        traj.conversation.push_back(reply);

        if (forced || reply.tool_calls.empty()) {
            traj.final_text = text;
            try {
                traj.prediction = parse_prediction(text);
                return finish(Termination::Answered);
            } catch (const PredictionParseError&) {
                if (forced && is_blank(text)) {
                    return finish(Termination::BudgetExhausted);
                }
                return finish(Termination::Unparseable);
            }
        }

        std::vector<std::string> new_images;
        bool first_call = true;
        for (const auto& call : reply.tool_calls) {
            if (static_cast<int>(traj.steps.size()) >= budget.max_turns) {
                ++traj.accounting.skipped_tool_calls;
                traj.conversation.push_back(ChatMessage::tool(
                    call.call_id, ToolResult::failure(call.call_id, "budget", std::string(kSkippedCall))
                                      .observation_text()));
                continue;
            }
            TrajectoryStep step;
            step.index = static_cast<int>(traj.steps.size());
            if (first_call && !is_blank(text)) {
                step.hypothesis = text;
            }
            first_call = false;
            step.action = call;

            auto validated = validate_call(registry, call, &images);
            ToolResult result = [&] {
                if (auto* err = std::get_if<ValidationError>(&validated)) {
                    return err->to_result(call.call_id);
                }
                try {
                    return env.execute(std::get<ValidatedCall>(validated), ctx);
                } catch (const std::exception& e) {
                    return ToolResult::failure(call.call_id, "internal-error", e.what());
                }
            }();
            result.call_id = call.call_id;
            if (truncate_observation(result, budget.max_tool_response_chars)) {
                ++traj.accounting.truncated_observations;
            }
            const std::string obs = result.observation_text();
            traj.accounting.observation_chars += obs.size();
            ++traj.accounting.tool_calls;
            if (const auto* img = result.image_payload()) {
                new_images.push_back(img->handle);
            }
            traj.conversation.push_back(ChatMessage::tool(call.call_id, obs));
            step.observation = std::move(result);
            traj.steps.push_back(std::move(step));
        }

        if (!new_images.empty()) {
            ChatMessage attach;
            attach.role = Role::User;
            std::string label = "Images returned by the tools:";
            for (const auto& h : new_images) {
                label += " [image " + h + "]";
            }
            attach.content.push_back(ContentPart::make_text(label));
            for (const auto& h : new_images) {
                attach.content.push_back(ContentPart::make_image(h));
            }
            traj.conversation.push_back(std::move(attach));
        }
    }
}

std::string_view candidate_status_name(CandidateStatus s) {
    switch (s) {
        case CandidateStatus::Proposed:
            return "proposed";
        case CandidateStatus::Supported:
            return "supported";
        case CandidateStatus::Refuted:
            return "refuted";
    }
    return "proposed";
}

namespace {

const std::regex& coord_pattern() {
    static const std::regex re(R"((-?\d{1,2}\.\d+)\s*,\s*(-?\d{1,3}\.\d+))");
    return re;
}

std::vector<GeoPoint> coordinates_in(const std::string& text) {
    std::vector<GeoPoint> out;
    for (std::sregex_iterator it(text.begin(), text.end(), coord_pattern()), end; it != end; ++it) {
        try {
            out.emplace_back(std::stod((*it)[1]), std::stod((*it)[2]));
        } catch (const std::exception&) {
        }
    }
    return out;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_fields(const std::string& line, std::string_view sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto next = line.find(sep, pos);
        out.push_back(trim(std::string_view(line).substr(pos, next == std::string::npos ? next : next - pos)));
        if (next == std::string::npos) {
            return out;
        }
        pos = next + sep.size();
    }
}

struct PoolBuilder {
    std::vector<Candidate> entries;

    static void touch(Candidate& c, int step) {
        if (std::find(c.supporting_steps.begin(), c.supporting_steps.end(), step) == c.supporting_steps.end()) {
            c.supporting_steps.push_back(step);
        }
    }

    Candidate* nearest(const GeoPoint& p) {
        Candidate* best = nullptr;
        double best_d = kMergeRadiusMeters;
        for (auto& c : entries) {
            if (c.location) {
                const double d = geodesic_distance(*c.location, p);
                if (d <= best_d) {
                    best_d = d;
                    best = &c;
                }
            }
        }
        return best;
    }

    Candidate* by_name(const std::string& name) {
        const auto key = lower(name);
        for (auto& c : entries) {
            if (lower(c.label) == key) {
                return &c;
            }
        }
        return nullptr;
    }

    void add_coordinate(const GeoPoint& p, int step) {
        if (auto* c = nearest(p)) {
            touch(*c, step);
            return;
        }
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f", p.lat(), p.lon());
        entries.push_back({buf, p, std::nullopt, {step}, CandidateStatus::Proposed});
    }

    void add_place(const std::string& name, int step) {
        if (auto* c = by_name(name)) {
            touch(*c, step);
            return;
        }
        entries.push_back({name, std::nullopt, std::nullopt, {step}, CandidateStatus::Proposed});
    }

    void add_poi(const std::string& id, const std::string& name, const std::optional<GeoPoint>& where, int step) {
        for (auto& c : entries) {
            if (c.poi_id == id) {
                if (!c.location) {
                    c.location = where;
                }
                touch(c, step);
                return;
            }
        }
        if (auto* c = by_name(name); c != nullptr && !c->poi_id) {
            c->poi_id = id;
            if (!c->location) {
                c->location = where;
            }
            touch(*c, step);
            return;
        }
        entries.push_back({name, where, id, {step}, CandidateStatus::Proposed});
    }

    void absorb_observation(const std::string& obs, int step) {
        std::istringstream in(obs);
        std::string line;
        std::optional<std::string> detail_id;
        std::string detail_name;
        std::optional<GeoPoint> detail_loc;
        static const std::regex list_line(R"(^\d+\. id=([^ |]+) \| (.*)$)");
        static const std::regex tip_line(R"(^\d+\. (.*) \(.*\) id=(\S+)$)");
        while (std::getline(in, line)) {
            std::smatch m;
            if (std::regex_match(line, m, list_line)) {
                const auto fields = split_fields(m[2].str(), " | ");
                std::optional<GeoPoint> where;
                if (fields.size() >= 4) {
                    if (auto pts = coordinates_in(fields[3]); !pts.empty()) {
                        where = pts.front();
                    }
                }
                add_poi(m[1].str(), fields.front(), where, step);
            } else if (std::regex_match(line, m, tip_line)) {
                add_poi(m[2].str(), m[1].str(), std::nullopt, step);
            } else if (line.starts_with("POI id=")) {
                detail_id = line.substr(7);
            } else if (detail_id && line.starts_with("name: ")) {
                detail_name = line.substr(6);
            } else if (detail_id && line.starts_with("location: ")) {
                if (auto pts = coordinates_in(line); !pts.empty()) {
                    detail_loc = pts.front();
                }
            }
        }
        if (detail_id && !detail_name.empty()) {
            add_poi(*detail_id, detail_name, detail_loc, step);
        }
    }
};

const std::vector<std::string_view>& refutation_cues() {
    static const std::vector<std::string_view> cues = {
        " not ", "n't ", "rule out", "ruled out", "ruling out", "refut", "inconsistent",
        "mismatch", "unlikely", "eliminat", "reject",
    };
    return cues;
}

std::vector<std::string> clauses(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == '.' || c == '!' || c == '?' || c == '\n' || c == ',' || c == ';') {
            // Keep decimal points and coordinate commas inside the clause.
            if ((c == '.' || c == ',') && !cur.empty() && std::isdigit(static_cast<unsigned char>(cur.back()))) {
                cur += c;
                continue;
            }
            if (!is_blank(cur)) {
                out.push_back(" " + lower(cur) + " ");
            }
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!is_blank(cur)) {
        out.push_back(" " + lower(cur) + " ");
    }
    return out;
}

bool mentions(const std::string& clause, const Candidate& c) {
    if (!c.label.empty() && clause.find(lower(c.label)) != std::string::npos) {
        return true;
    }
    if (c.location) {
        for (const auto& p : coordinates_in(clause)) {
            if (geodesic_distance(p, *c.location) <= kMergeRadiusMeters) {
                return true;
            }
        }
    }
    return false;
}

bool has_cue(const std::string& clause) {
    return std::any_of(refutation_cues().begin(), refutation_cues().end(),
                       [&](std::string_view cue) { return clause.find(cue) != std::string::npos; });
}

}  // namespace

CandidatePool extract_candidate_pool(const Trajectory& trajectory) {
    PoolBuilder b;
    for (const auto& step : trajectory.steps) {
        if (step.hypothesis) {
            for (const auto& p : coordinates_in(*step.hypothesis)) {
                b.add_coordinate(p, step.index);
            }
            const auto hyp = lower(*step.hypothesis);
            for (auto& c : b.entries) {
                if (!c.label.empty() && hyp.find(lower(c.label)) != std::string::npos) {
                    PoolBuilder::touch(c, step.index);
                }
            }
        }
        if (step.action) {
            const auto& args = step.action->arguments;
            if (args.is_object() && args.contains("center")) {
                if (auto loc = parse_location(args.at("center"))) {
                    if (const auto* p = std::get_if<GeoPoint>(&*loc)) {
                        b.add_coordinate(*p, step.index);
                    } else {
                        b.add_place(std::get<std::string>(*loc), step.index);
                    }
                }
            }
        }
        if (step.observation && !step.observation->is_error()) {
            if (const auto* t = std::get_if<TextPayload>(&step.observation->body)) {
                b.absorb_observation(t->text, step.index);
            }
        }
    }

    std::vector<std::string> reasoning;
    for (const auto& step : trajectory.steps) {
        if (step.hypothesis) {
            for (auto& c : clauses(*step.hypothesis)) {
                reasoning.push_back(std::move(c));
            }
        }
    }
    const auto final_clauses = clauses(trajectory.final_text);

    for (auto& c : b.entries) {
        bool supported = false;
        bool refuted = false;
        for (const auto& cl : final_clauses) {
            if (mentions(cl, c)) {
                (has_cue(cl) ? refuted : supported) = true;
            }
        }
        if (trajectory.prediction && c.location &&
            geodesic_distance(trajectory.prediction->point, *c.location) <= kMergeRadiusMeters) {
            supported = true;
        }
        for (const auto& cl : reasoning) {
            if (mentions(cl, c) && has_cue(cl)) {
                refuted = true;
            }
        }
        c.status = supported ? CandidateStatus::Supported
                   : refuted ? CandidateStatus::Refuted
                             : CandidateStatus::Proposed;
    }
    return CandidatePool{std::move(b.entries)};
}

std::string serialize_trajectory(const Trajectory& trajectory) {
    std::ostringstream out;
    for (const auto& step : trajectory.steps) {
        out << "[Step " << step.index << "]\n";
        if (step.hypothesis) {
            out << "Hypothesis: " << *step.hypothesis << '\n';
        }
        if (step.action) {
            out << "Action: " << step.action->tool_name << ' ' << step.action->arguments.dump() << '\n';
        }
        if (step.observation) {
            out << "Observation: " << step.observation->observation_text() << '\n';
        }
        out << '\n';
    }
    out << "[Final answer]\n";
    out << "Termination: " << termination_name(trajectory.termination) << '\n';
    if (!trajectory.final_text.empty()) {
        out << "Response: " << trajectory.final_text << '\n';
    }
    if (trajectory.prediction) {
        out << "Prediction: " << serialize_prediction(*trajectory.prediction) << '\n';
    }
    return out.str();
}

nlohmann::ordered_json tool_result_to_json(const ToolResult& result) {
    nlohmann::ordered_json j;
    j["call_id"] = result.call_id;
    if (const auto* t = std::get_if<TextPayload>(&result.body)) {
        j["kind"] = "text";
        j["text"] = t->text;
    } else if (const auto* img = std::get_if<ImagePayload>(&result.body)) {
        j["kind"] = "image";
        j["handle"] = img->handle;
        j["caption"] = img->caption;
    } else {
        const auto& f = std::get<ToolFailure>(result.body);
        j["kind"] = "error";
        j["error_kind"] = f.kind;
        j["message"] = f.message;
    }
    j["truncated"] = result.truncated;
    return j;
}

ToolResult tool_result_from_json(const nlohmann::json& j) {
    const auto kind = j.at("kind").get<std::string>();
    const auto id = j.at("call_id").get<std::string>();
    ToolResult r = kind == "text"    ? ToolResult::text(id, j.at("text").get<std::string>())
                   : kind == "image" ? ToolResult::image(id, j.at("handle").get<std::string>(),
                                                         j.at("caption").get<std::string>())
                   : kind == "error" ? ToolResult::failure(id, j.at("error_kind").get<std::string>(),
                                                           j.at("message").get<std::string>())
                                     : throw std::invalid_argument("unknown observation kind '" + kind + "'");
    r.truncated = j.value("truncated", false);
    return r;
}

nlohmann::ordered_json trajectory_to_json(const Trajectory& t, const nlohmann::ordered_json& metadata) {
    nlohmann::ordered_json doc;
    doc["schema"] = kTrajectorySchema;
    doc["sample_id"] = t.query.sample_id;
    doc["query"] = {{"image", t.query.image_path.generic_string()},
                    {"instruction", t.query.instruction},
                    {"region_hint", t.query.region_hint}};
    auto steps = nlohmann::ordered_json::array();
    for (const auto& s : t.steps) {
        nlohmann::ordered_json js;
        js["index"] = s.index;
        js["hypothesis"] = s.hypothesis ? nlohmann::ordered_json(*s.hypothesis) : nlohmann::ordered_json();
        if (s.action) {
            js["action"] = {{"id", s.action->call_id},
                            {"name", s.action->tool_name},
                            {"arguments", nlohmann::ordered_json::parse(s.action->arguments.dump())}};
        } else {
            js["action"] = nullptr;
        }
        js["observation"] = s.observation ? tool_result_to_json(*s.observation) : nlohmann::ordered_json();
        steps.push_back(std::move(js));
    }
    doc["steps"] = std::move(steps);
    doc["final_text"] = t.final_text;
    if (t.prediction) {
        doc["prediction"] = {{"lat", t.prediction->point.lat()},
                             {"lon", t.prediction->point.lon()},
                             {"city", t.prediction->city},
                             {"country", t.prediction->country}};
    } else {
        doc["prediction"] = nullptr;
    }
    doc["termination"] = termination_name(t.termination);
    doc["forced_final_turn"] = t.forced_final_turn;
    doc["error"] = t.error;
    doc["accounting"] = {{"assistant_turns", t.accounting.assistant_turns},
                         {"tool_calls", t.accounting.tool_calls},
                         {"skipped_tool_calls", t.accounting.skipped_tool_calls},
                         {"truncated_observations", t.accounting.truncated_observations},
                         {"context_drops", t.accounting.context_drops},
                         {"assistant_chars", t.accounting.assistant_chars},
                         {"observation_chars", t.accounting.observation_chars}};
    auto conv = nlohmann::ordered_json::array();
    for (const auto& m : t.conversation) {
        conv.push_back(message_to_json(m));
    }
    doc["conversation"] = std::move(conv);
    doc["metadata"] = metadata;
    return doc;
}

Trajectory trajectory_from_json(const nlohmann::json& doc) {
    if (doc.value("schema", "") != kTrajectorySchema) {
        throw std::invalid_argument("not a trajectory document (schema " + doc.value("schema", "<missing>") + ")");
    }
    Trajectory t;
    t.query.sample_id = doc.value("sample_id", "");
    const auto& q = doc.at("query");
    t.query.image_path = q.at("image").get<std::string>();
    t.query.instruction = q.at("instruction").get<std::string>();
    t.query.region_hint = q.value("region_hint", "");
    for (const auto& js : doc.at("steps")) {
        TrajectoryStep s;
        s.index = js.at("index").get<int>();
        if (!js.at("hypothesis").is_null()) {
            s.hypothesis = js.at("hypothesis").get<std::string>();
        }
        if (!js.at("action").is_null()) {
            const auto& a = js.at("action");
            s.action = ToolCall{a.at("id").get<std::string>(), a.at("name").get<std::string>(), a.at("arguments")};
        }
        if (!js.at("observation").is_null()) {
            s.observation = tool_result_from_json(js.at("observation"));
        }
        t.steps.push_back(std::move(s));
    }
    t.final_text = doc.at("final_text").get<std::string>();
    if (const auto& p = doc.at("prediction"); !p.is_null()) {
        t.prediction = Prediction{GeoPoint(p.at("lat").get<double>(), p.at("lon").get<double>()),
                                  p.value("city", ""), p.value("country", "")};
    }
    t.termination = parse_termination(doc.at("termination").get<std::string>());
    t.forced_final_turn = doc.value("forced_final_turn", false);
    t.error = doc.value("error", "");
    const auto& a = doc.at("accounting");
    t.accounting.assistant_turns = a.value("assistant_turns", 0);
    t.accounting.tool_calls = a.value("tool_calls", 0);
    t.accounting.skipped_tool_calls = a.value("skipped_tool_calls", 0);
    t.accounting.truncated_observations = a.value("truncated_observations", 0);
    t.accounting.context_drops = a.value("context_drops", 0);
    t.accounting.assistant_chars = a.value("assistant_chars", std::size_t{0});
    t.accounting.observation_chars = a.value("observation_chars", std::size_t{0});
    for (const auto& m : doc.at("conversation")) {
        t.conversation.push_back(message_from_json(m));
    }
    return t;
}

}  // namespace mapagent
