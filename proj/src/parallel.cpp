#include "mapagent/parallel.hpp"

#include <cmath>
#include <mutex>
#include <thread>

namespace mapagent {

void ParallelConfig::validate() const {
    if (n < 1) {
        throw std::invalid_argument("parallel sample count must be at least 1");
    }
    if (fanout < 1) {
        throw std::invalid_argument("fan-out must be at least 1");
    }
    budget.validate();
}

std::vector<Trajectory> sample_parallel(const GeoQuery& query, const PolicyForSlot& policy, MapBackend& env,
                                        const ToolRegistry& registry, const ParallelConfig& config,
                                        const std::atomic<bool>* stop) {
    config.validate();
    (void)query.load_image();

    std::vector<std::optional<Trajectory>> slots(static_cast<std::size_t>(config.n));
    std::atomic<int> next{0};
    std::mutex err_mu;
    std::exception_ptr failure;

    auto worker = [&] {
        while (true) {
            if (stop != nullptr && stop->load()) {
                return;
            }
            const int slot = next.fetch_add(1);
            if (slot >= config.n) {
                return;
            }
            try {
                slots[static_cast<std::size_t>(slot)] =
                    run_episode(query, policy(slot), env, registry, config.budget, config.episode);
            } catch (...) {
                std::lock_guard lock(err_mu);
                if (!failure) {
                    failure = std::current_exception();
                }
            }
        }
    };

    const int workers = std::min(config.n, config.fanout);
    {
        std::vector<std::jthread> pool;
        for (int i = 0; i < workers; ++i) {
            pool.emplace_back(worker);
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }

    std::vector<Trajectory> out;
    for (auto& s : slots) {
        if (!s) {
            break;
        }
        out.push_back(std::move(*s));
    }
    return out;
}

std::vector<ChatMessage> build_verifier_prompt(const GeoQuery& query, std::span<const Trajectory> trajectories) {
    if (trajectories.empty()) {
        throw std::invalid_argument("verifier prompt needs at least one trajectory");
    }
    std::string body = "Original task:\n" + query.instruction + "\n";
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        body += "\n### Candidate " + std::to_string(i + 1) + "\n" + serialize_trajectory(trajectories[i]);
    }
    ChatMessage user;
    user.role = Role::User;
    user.content = {ContentPart::make_image("query"), ContentPart::make_text(std::move(body))};
    return {ChatMessage::system(std::string(kVerifierPrompt)), std::move(user)};
}

VerifierOutcome verify(const GeoQuery& query, std::span<const Trajectory> trajectories, ChatPolicy& verifier,
                       const SamplingParams& params) {
    const auto prompt = build_verifier_prompt(query, trajectories);
    VerifierOutcome out;
    try {
        ImageStore images;
        images.add_query(query.load_image());
        const ChatMessage reply = verifier.chat(prompt, nlohmann::ordered_json::array(), params, &images);
        out.transcript = reply.text();
        out.prediction = parse_prediction(out.transcript);
        return out;
    } catch (const ChatError& e) {
        out.error = std::string(chat_error_name(e.kind())) + ": " + e.what();
    } catch (const PredictionParseError& e) {
        out.error = std::string("unparseable verifier reply: ") + e.what();
    } catch (const ImageError& e) {
        out.error = std::string("query image: ") + e.what();
    }
    out.fallback = true;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        if (trajectories[i].answered() && trajectories[i].prediction) {
            out.prediction = trajectories[i].prediction;
            out.fallback_slot = static_cast<int>(i);
            break;
        }
    }
    return out;
}

OracleChoice best_at_n(std::span<const double> slot_errors) {
    OracleChoice best;
    for (std::size_t i = 0; i < slot_errors.size(); ++i) {
        if (std::isfinite(slot_errors[i]) && (best.slot < 0 || slot_errors[i] < best.error_m)) {
            best = {slot_errors[i], static_cast<int>(i)};
        }
    }
    if (best.slot < 0) {
        throw UndefinedOracleError("best@N is undefined: no answered trajectory");
    }
    return best;
}

OracleChoice best_at_n(std::span<const Trajectory> trajectories, const GeoPoint& truth) {
    std::vector<double> errors;
    for (const auto& t : trajectories) {
        errors.push_back(t.answered() && t.prediction ? geodesic_distance(t.prediction->point, truth)
                                                      : kUnscoredDistance);
    }
    return best_at_n(errors);
}

double pass_at_k(int n, int c, int k) {
    if (k < 1 || k > n) {
        throw std::invalid_argument("pass@K needs 1 <= K <= N");
    }
    if (c < 0 || c > n) {
        throw std::invalid_argument("correct count must lie in [0, N]");
    }
    if (n - c < k) {
        return 1.0;
    }
    // C(n-c, k) / C(n, k) = prod_{i=0}^{k-1} (n-c-i) / (n-i)
    double miss = 1.0;
    for (int i = 0; i < k; ++i) {
        miss *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
    }
    return 1.0 - miss;
}

double pass_at_k(const std::vector<std::vector<double>>& errors, int k, double threshold_m) {
    if (errors.empty()) {
        throw std::invalid_argument("pass@K needs at least one sample");
    }
    double sum = 0.0;
    for (const auto& sample : errors) {
        int c = 0;
        for (double e : sample) {
            c += e < threshold_m ? 1 : 0;
        }
        sum += pass_at_k(static_cast<int>(sample.size()), c, k);
    }
    return sum / static_cast<double>(errors.size());
}

nlohmann::ordered_json parallel_run_to_json(const ParallelRun& run, const nlohmann::ordered_json& metadata) {
    nlohmann::ordered_json doc;
    doc["schema"] = kParallelRunSchema;
    doc["sample_id"] = run.query.sample_id;
    doc["n"] = run.trajectories.size();
    auto trajs = nlohmann::ordered_json::array();
    for (const auto& t : run.trajectories) {
        trajs.push_back(trajectory_to_json(t));
    }
    doc["trajectories"] = std::move(trajs);
    nlohmann::ordered_json v;
    if (run.verifier.prediction) {
        v["prediction"] = nlohmann::ordered_json::parse(serialize_prediction(*run.verifier.prediction));
    } else {
        v["prediction"] = nullptr;
    }
    v["fallback"] = run.verifier.fallback;
    v["fallback_slot"] = run.verifier.fallback_slot;
    v["transcript"] = run.verifier.transcript;
    v["error"] = run.verifier.error;
    doc["verifier"] = std::move(v);
    doc["metadata"] = metadata;
    return doc;
}

ParallelRun parallel_run_from_json(const nlohmann::json& doc) {
    if (doc.value("schema", "") != kParallelRunSchema) {
        throw std::invalid_argument("not a parallel-run document");
    }
    ParallelRun run;
    for (const auto& t : doc.at("trajectories")) {
        run.trajectories.push_back(trajectory_from_json(t));
    }
    if (!run.trajectories.empty()) {
        run.query = run.trajectories.front().query;
    }
    const auto& v = doc.at("verifier");
    if (!v.at("prediction").is_null()) {
        run.verifier.prediction = parse_prediction(v.at("prediction").dump());
    }
    run.verifier.fallback = v.value("fallback", false);
    run.verifier.fallback_slot = v.value("fallback_slot", -1);
    run.verifier.transcript = v.value("transcript", "");
    run.verifier.error = v.value("error", "");
    return run;
}

}  // namespace mapagent
