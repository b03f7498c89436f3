#include "caltune/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "caltune/rng.hpp"

namespace caltune::io {

using nlohmann::json;

namespace {

[[noreturn]] void fail_line(std::size_t line_number, const std::string& message) {
    throw error(errc::malformed_line,
                "line " + std::to_string(line_number) + ": " + message);
}

bool is_blank(const std::string& s) {
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) return false;
    return true;
}

} // namespace

prediction_log read_prediction_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw error(errc::io_error, "cannot open '" + path.string() + "'");

    prediction_log log;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (is_blank(line)) continue;

        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            fail_line(line_number, std::string("invalid JSON (") + e.what() + ")");
        }
        if (!obj.is_object()) fail_line(line_number, "expected a JSON object");
        if (!obj.contains("logits") || !obj["logits"].is_array())
            fail_line(line_number, "missing 'logits' array");
        if (!obj.contains("label") || !obj["label"].is_number_integer())
            fail_line(line_number, "missing integer 'label'");

        calib::logit_label_pair pair;
        for (const auto& v : obj["logits"]) {
            if (!v.is_number())
                fail_line(line_number, "'logits' entries must be numbers");
            const double x = v.get<double>();
            if (!std::isfinite(x))
                fail_line(line_number, "non-finite logit");
            pair.logits.push_back(x);
        }
        if (pair.logits.size() < 2)
            fail_line(line_number, "need at least 2 logits");
        const long long label = obj["label"].get<long long>();
        if (label < 0 || label >= static_cast<long long>(pair.logits.size()))
            fail_line(line_number, "label out of range");
        pair.label = static_cast<std::size_t>(label);

        std::string id;
        if (obj.contains("id")) {
            if (!obj["id"].is_string())
                fail_line(line_number, "'id' must be a string");
            id = obj["id"].get<std::string>();
        }

        if (log.pairs.empty()) {
            log.num_classes = pair.logits.size();
        } else if (pair.logits.size() != log.num_classes) {
            throw error(errc::inconsistent_class_count,
                        "line " + std::to_string(line_number) + ": expected " +
                            std::to_string(log.num_classes) + " logits, got " +
                            std::to_string(pair.logits.size()));
        }
        log.pairs.push_back(std::move(pair));
        log.ids.push_back(std::move(id));
    }
    if (log.pairs.empty())
        throw error(errc::empty_record_set, "'" + path.string() + "' holds no records");
    return log;
}

embedding_file read_embedding_file(const std::filesystem::path& path) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw error(errc::schema_error, std::string("invalid JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("dim") || !doc.contains("sets"))
        throw error(errc::schema_error, "embedding file needs 'dim' and 'sets'");
    if (!doc["dim"].is_number_unsigned() || doc["dim"].get<std::size_t>() < 1)
        throw error(errc::schema_error, "/dim: expected a positive integer");
    if (!doc["sets"].is_array())
        throw error(errc::schema_error, "/sets: expected an array");

    embedding_file file;
    file.dim = doc["dim"].get<std::size_t>();
    for (const auto& set_json : doc["sets"]) {
        if (!set_json.is_object() || !set_json.contains("prompt_id") ||
            !set_json.contains("features"))
            throw error(errc::schema_error, "/sets: entries need 'prompt_id' and 'features'");
        embedding_set set;
        set.prompt_id = set_json["prompt_id"].get<std::string>();
        for (const auto& row : set_json["features"]) {
            vec feature;
            for (const auto& v : row) {
                if (!v.is_number())
                    throw error(errc::schema_error,
                                "features of '" + set.prompt_id + "' must be numeric");
                feature.push_back(v.get<double>());
            }
            if (feature.size() != file.dim)
                throw error(errc::dimension_mismatch,
                            "prompt '" + set.prompt_id + "': feature row has length " +
                                std::to_string(feature.size()) + ", expected " +
                                std::to_string(file.dim));
            set.features.push_back(std::move(feature));
        }
        file.sets.push_back(std::move(set));
    }
    return file;
}

void write_embedding_file(const std::filesystem::path& path, const embedding_file& file) {
    json doc;
    doc["dim"] = file.dim;
    doc["sets"] = json::array();
    for (const auto& set : file.sets) {
        json s;
        s["prompt_id"] = set.prompt_id;
        s["features"] = json::array();
        for (const auto& f : set.features) s["features"].push_back(f);
        doc["sets"].push_back(std::move(s));
    }
    atomic_write(path, doc.dump(2) + "\n");
}

// --- experiment configuration --------------------------------------------

namespace {

[[noreturn]] void schema_fail(const std::string& pointer, const std::string& message) {
    throw error(errc::schema_error, pointer + ": " + message);
}

void reject_unknown_keys(const json& obj, const std::string& pointer,
                         std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* key : allowed)
            if (it.key() == key) {
                known = true;
                break;
            }
        if (!known) schema_fail(pointer + "/" + it.key(), "unknown key");
    }
}

double take_number(const json& obj, const char* key, const std::string& pointer,
                   double fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number()) schema_fail(pointer + "/" + key, "expected a number");
    return obj[key].get<double>();
}

std::size_t take_uint(const json& obj, const char* key, const std::string& pointer,
                      std::size_t fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number_unsigned())
        schema_fail(pointer + "/" + key, "expected a non-negative integer");
    return obj[key].get<std::size_t>();
}

std::uint64_t take_seed(const json& obj, const char* key, const std::string& pointer,
                        std::uint64_t fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number_unsigned())
        schema_fail(pointer + "/" + key, "expected a non-negative integer");
    return obj[key].get<std::uint64_t>();
}

std::string take_string(const json& obj, const char* key, const std::string& pointer,
                        const std::string& fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_string()) schema_fail(pointer + "/" + key, "expected a string");
    return obj[key].get<std::string>();
}

bool take_bool(const json& obj, const char* key, const std::string& pointer,
               bool fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_boolean()) schema_fail(pointer + "/" + key, "expected a boolean");
    return obj[key].get<bool>();
}

} // namespace

experiment_spec parse_experiment_config(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw error(errc::schema_error, std::string("invalid JSON: ") + e.what());
    }
    if (!doc.is_object()) schema_fail("", "config must be a JSON object");

    reject_unknown_keys(doc, "",
                        {"dim", "prompt_length", "num_classes", "dataset_size", "tau",
                         "bins", "image_noise_sigma", "label_noise", "prompt_mixing_scale",
                         "prompt_init_scale", "seeds", "tuning", "arms", "output",
                         "prompt_family"});

    experiment_spec spec;
    spec.dim = take_uint(doc, "dim", "", spec.dim);
    if (spec.dim < 4) schema_fail("/dim", "must be >= 4");
    spec.prompt_length = take_uint(doc, "prompt_length", "", spec.prompt_length);
    if (spec.prompt_length < 1) schema_fail("/prompt_length", "must be >= 1");
    spec.num_classes = take_uint(doc, "num_classes", "", spec.num_classes);
    if (spec.num_classes < 2) schema_fail("/num_classes", "must be >= 2");
    spec.dataset_size = take_uint(doc, "dataset_size", "", spec.dataset_size);
    if (spec.dataset_size < 1) schema_fail("/dataset_size", "must be >= 1");
    spec.tau = take_number(doc, "tau", "", spec.tau);
    if (!(spec.tau > 0.0)) schema_fail("/tau", "must be > 0");
    spec.bins = take_uint(doc, "bins", "", spec.bins);
    if (spec.bins < 1) schema_fail("/bins", "must be >= 1");
    spec.image_noise_sigma = take_number(doc, "image_noise_sigma", "", spec.image_noise_sigma);
    if (spec.image_noise_sigma < 0.0) schema_fail("/image_noise_sigma", "must be >= 0");
    spec.label_noise = take_number(doc, "label_noise", "", spec.label_noise);
    if (spec.label_noise < 0.0 || spec.label_noise >= 0.5)
        schema_fail("/label_noise", "must be in [0, 0.5)");
    spec.prompt_mixing_scale =
        take_number(doc, "prompt_mixing_scale", "", spec.prompt_mixing_scale);
    if (spec.prompt_mixing_scale < 0.0) schema_fail("/prompt_mixing_scale", "must be >= 0");
    spec.prompt_init_scale = take_number(doc, "prompt_init_scale", "", spec.prompt_init_scale);
    if (spec.prompt_init_scale < 0.0) schema_fail("/prompt_init_scale", "must be >= 0");

    if (doc.contains("seeds")) {
        const json& seeds = doc["seeds"];
        if (!seeds.is_object()) schema_fail("/seeds", "expected an object");
        reject_unknown_keys(seeds, "/seeds",
                            {"vocabulary", "dataset", "views", "encoder", "prompts"});
        spec.vocabulary_seed = take_seed(seeds, "vocabulary", "/seeds", spec.vocabulary_seed);
        spec.dataset_seed = take_seed(seeds, "dataset", "/seeds", spec.dataset_seed);
        spec.views_seed = take_seed(seeds, "views", "/seeds", spec.views_seed);
        spec.encoder_seed = take_seed(seeds, "encoder", "/seeds", spec.encoder_seed);
        if (seeds.contains("prompts")) {
            if (!seeds["prompts"].is_array() || seeds["prompts"].empty())
                schema_fail("/seeds/prompts", "expected a non-empty array");
            spec.prompt_seeds.clear();
            for (const auto& s : seeds["prompts"]) {
                if (!s.is_number_unsigned())
                    schema_fail("/seeds/prompts", "entries must be non-negative integers");
                spec.prompt_seeds.push_back(s.get<std::uint64_t>());
            }
        }
    }

    if (doc.contains("tuning")) {
        const json& tun = doc["tuning"];
        if (!tun.is_object()) schema_fail("/tuning", "expected an object");
        reject_unknown_keys(tun, "/tuning",
                            {"lambda", "learning_rate", "steps", "n_views", "view_sigma",
                             "confidence_percentile", "optimizer", "beta1", "beta2",
                             "epsilon", "weight_decay"});
        auto& t = spec.tuning;
        t.lambda = take_number(tun, "lambda", "/tuning", t.lambda);
        t.learning_rate = take_number(tun, "learning_rate", "/tuning", t.learning_rate);
        t.steps = take_uint(tun, "steps", "/tuning", t.steps);
        t.n_views = take_uint(tun, "n_views", "/tuning", t.n_views);
        t.view_sigma = take_number(tun, "view_sigma", "/tuning", t.view_sigma);
        t.confidence_percentile =
            take_number(tun, "confidence_percentile", "/tuning", t.confidence_percentile);
        const std::string opt = take_string(tun, "optimizer", "/tuning",
                                            "adaptive_moment_decoupled_decay");
        if (opt == "adaptive_moment_decoupled_decay")
            t.optimizer = tpt::optimizer_kind::adaptive_moment_decoupled_decay;
        else if (opt == "plain_gradient_descent")
            t.optimizer = tpt::optimizer_kind::plain_gradient_descent;
        else
            schema_fail("/tuning/optimizer", "unknown optimizer '" + opt + "'");
        t.beta1 = take_number(tun, "beta1", "/tuning", t.beta1);
        t.beta2 = take_number(tun, "beta2", "/tuning", t.beta2);
        t.epsilon = take_number(tun, "epsilon", "/tuning", t.epsilon);
        t.weight_decay = take_number(tun, "weight_decay", "/tuning", t.weight_decay);
        try {
            t.validate();
        } catch (const error& e) {
            schema_fail("/tuning", e.what());
        }
    }

    if (doc.contains("arms")) {
        if (!doc["arms"].is_array() || doc["arms"].empty())
            schema_fail("/arms", "expected a non-empty array");
        spec.arms.clear();
        for (const auto& a : doc["arms"]) {
            if (!a.is_string()) schema_fail("/arms", "entries must be strings");
            const std::string name = a.get<std::string>();
            if (name != "baseline" && name != "tpt" && name != "ctpt" && name != "ensemble")
                schema_fail("/arms", "unknown arm '" + name + "'");
            spec.arms.push_back(name);
        }
    }

    if (doc.contains("output")) {
        const json& outj = doc["output"];
        if (!outj.is_object()) schema_fail("/output", "expected an object");
        reject_unknown_keys(outj, "/output", {"directory", "prefix", "emit_embeddings"});
        spec.output_directory = take_string(outj, "directory", "/output", spec.output_directory);
        spec.output_prefix = take_string(outj, "prefix", "/output", spec.output_prefix);
        spec.emit_embeddings = take_bool(outj, "emit_embeddings", "/output", false);
    }

    if (doc.contains("prompt_family")) {
        const json& fam = doc["prompt_family"];
        if (!fam.is_object()) schema_fail("/prompt_family", "expected an object");
        reject_unknown_keys(fam, "/prompt_family", {"count", "seed", "scale_min", "scale_max"});
        spec.prompt_family.enabled = true;
        spec.prompt_family.count = take_uint(fam, "count", "/prompt_family", 40);
        if (spec.prompt_family.count < 1) schema_fail("/prompt_family/count", "must be >= 1");
        spec.prompt_family.seed = take_seed(fam, "seed", "/prompt_family", 21);
        spec.prompt_family.scale_min =
            take_number(fam, "scale_min", "/prompt_family", 0.0);
        spec.prompt_family.scale_max =
            take_number(fam, "scale_max", "/prompt_family", 1.0);
        if (spec.prompt_family.scale_min < 0.0 ||
            spec.prompt_family.scale_max < spec.prompt_family.scale_min)
            schema_fail("/prompt_family", "need 0 <= scale_min <= scale_max");
    }

    return spec;
}

experiment_spec load_experiment_config(const std::filesystem::path& path) {
    return parse_experiment_config(read_file(path));
}

// --- formatting and files --------------------------------------------------

std::string format_double(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void atomic_write(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw error(errc::io_error, "cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out)
            throw error(errc::io_error, "failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw error(errc::io_error, "cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::size_t thread_cap_from_env() {
    const char* env = std::getenv("CALTUNE_THREADS");
    if (env != nullptr) {
        char* end = nullptr;
        const unsigned long n = std::strtoul(env, &end, 10);
        if (end != env && *end == '\0' && n >= 1) return static_cast<std::size_t>(n);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

// --- simulate ----------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string episodes_csv(const std::vector<tpt::arm_result>& arms) {
    std::ostringstream csv;
    csv << "arm,episode,label,predicted_before,confidence_before,correct_before,"
           "predicted_after,confidence_after,correct_after,atfd_before,atfd_after,"
           "view_hash,non_finite\n";
    for (const auto& arm : arms) {
        for (std::size_t i = 0; i < arm.episodes.size(); ++i) {
            const auto& ep = arm.episodes[i];
            csv << arm.name << ',' << i << ',' << ep.record_before.label << ','
                << ep.record_before.predicted << ','
                << format_double(ep.record_before.confidence) << ','
                << (ep.record_before.correct() ? 1 : 0) << ','
                << ep.record_after.predicted << ','
                << format_double(ep.record_after.confidence) << ','
                << (ep.record_after.correct() ? 1 : 0) << ','
                << format_double(ep.atfd_before) << ',' << format_double(ep.atfd_after)
                << ',' << hex64(ep.view_hash) << ',' << (ep.non_finite_abort ? 1 : 0)
                << '\n';
        }
    }
    return csv.str();
}

json reliability_json(const calib::reliability_bins& bins) {
    json rows = json::array();
    for (const auto& bin : bins.bins) {
        json row;
        row["lo"] = bin.lo;
        row["hi"] = bin.hi;
        row["count"] = bin.count;
        row["accuracy"] = bin.accuracy;
        row["mean_confidence"] = bin.mean_confidence;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(
        std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace

simulate_result simulate_run(const experiment_spec& spec, const std::string& config_text,
                             const std::vector<double>& sweep_lambdas,
                             const std::filesystem::path& output_directory,
                             std::size_t threads) {
    const sim::class_vocabulary vocab =
        sim::generate_vocabulary(spec.vocabulary_seed, spec.num_classes, spec.dim);
    const sim::synthetic_encoder_config enc = sim::make_encoder_config(
        spec.encoder_seed, spec.dim, spec.prompt_length, spec.image_noise_sigma,
        spec.label_noise, spec.prompt_mixing_scale);
    const sim::sample_batch dataset =
        sim::generate_batch(vocab, enc, spec.dataset_size, spec.dataset_seed);

    std::vector<sim::prompt_embedding> prompt_inits;
    prompt_inits.reserve(spec.prompt_seeds.size());
    for (std::uint64_t s : spec.prompt_seeds)
        prompt_inits.push_back(
            sim::make_prompt(s, spec.prompt_length, spec.dim, spec.prompt_init_scale));

    tpt::experiment_config experiment;
    experiment.arms = spec.arms;
    experiment.bins = spec.bins;
    experiment.view_seed_base = spec.views_seed;
    experiment.threads = threads;

    const std::vector<tpt::arm_result> arms = tpt::run_experiment(
        dataset, prompt_inits, vocab, enc, spec.tuning, spec.tau, experiment);

    std::filesystem::create_directories(output_directory);
    const auto artifact_path = [&](const std::string& suffix) {
        return output_directory / (spec.output_prefix + suffix);
    };

    simulate_result result;

    json report;
    report["tau"] = spec.tau;
    report["bins"] = spec.bins;
    report["arms"] = json::array();
    for (const auto& arm : arms) {
        json a;
        a["name"] = arm.name;
        a["accuracy"] = arm.report.accuracy;
        a["ece"] = arm.report.ece;
        a["mean_confidence"] = arm.report.mean_confidence;
        a["mean_atfd"] = arm.mean_atfd;
        a["non_finite_episodes"] = arm.non_finite_episodes;
        a["reliability"] = reliability_json(arm.report.bins);
        report["arms"].push_back(std::move(a));
    }
    const std::filesystem::path report_path = artifact_path("_report.json");
    atomic_write(report_path, report.dump(2) + "\n");
    result.data_files.push_back(report_path);

    const std::filesystem::path episodes_path = artifact_path("_episodes.csv");
    atomic_write(episodes_path, episodes_csv(arms));
    result.data_files.push_back(episodes_path);

    if (!sweep_lambdas.empty()) {
        const std::vector<tpt::sweep_row> rows =
            tpt::sweep_lambda(dataset, prompt_inits.front(), vocab, enc, spec.tuning,
                              spec.tau, sweep_lambdas, experiment);
        std::ostringstream csv;
        csv << "lambda,accuracy,ece,mean_atfd\n";
        for (const auto& row : rows)
            csv << format_double(row.lambda) << ',' << format_double(row.accuracy) << ','
                << format_double(row.ece) << ',' << format_double(row.mean_atfd) << '\n';
        const std::filesystem::path sweep_path = artifact_path("_lambda_sweep.csv");
        atomic_write(sweep_path, csv.str());
        result.data_files.push_back(sweep_path);
    }

    if (spec.prompt_family.enabled) {
        std::vector<sim::prompt_embedding> family;
        family.reserve(spec.prompt_family.count);
        for (std::size_t k = 0; k < spec.prompt_family.count; ++k) {
            const double t = spec.prompt_family.count > 1
                                 ? static_cast<double>(k) /
                                       static_cast<double>(spec.prompt_family.count - 1)
                                 : 0.0;
            const double scale = spec.prompt_family.scale_min +
                                 t * (spec.prompt_family.scale_max -
                                      spec.prompt_family.scale_min);
            family.push_back(sim::make_prompt(derive_seed(spec.prompt_family.seed, k),
                                              spec.prompt_length, spec.dim, scale));
        }
        const std::vector<dispersion::prompt_result> rows =
            tpt::evaluate_prompt_family(family, vocab, enc, dataset, spec.tau, spec.bins);
        std::ostringstream csv;
        csv << "prompt_id,accuracy,ece,atfd\n";
        for (std::size_t k = 0; k < rows.size(); ++k)
            csv << "family_" << k << ',' << format_double(rows[k].accuracy) << ','
                << format_double(rows[k].ece) << ',' << format_double(rows[k].atfd) << '\n';
        const std::filesystem::path family_path = artifact_path("_prompt_family.csv");
        atomic_write(family_path, csv.str());
        result.data_files.push_back(family_path);
    }

    if (spec.emit_embeddings) {
        embedding_file file;
        file.dim = spec.dim;
        for (std::size_t p = 0; p < prompt_inits.size(); ++p) {
            embedding_set set;
            set.prompt_id = "init_" + std::to_string(spec.prompt_seeds[p]);
            const dispersion::text_feature_set features =
                sim::text_features(prompt_inits[p], vocab, enc);
            set.features = features.features;
            file.sets.push_back(std::move(set));
        }
        const std::filesystem::path emb_path = artifact_path("_text_features.json");
        write_embedding_file(emb_path, file);
        result.data_files.push_back(emb_path);
    }

    json manifest;
    manifest["tool"] = "caltune";
    manifest["config_fnv1a64"] = hex64(fnv1a64(config_text));
    manifest["created_utc"] = utc_timestamp();
    manifest["artifacts"] = json::array();
    for (const auto& path : result.data_files) {
        json a;
        a["path"] = path.filename().string();
        const std::string bytes = read_file(path);
        a["bytes"] = bytes.size();
        a["fnv1a64"] = hex64(fnv1a64(bytes));
        manifest["artifacts"].push_back(std::move(a));
    }
    result.manifest_file = artifact_path("_MANIFEST.json");
    atomic_write(result.manifest_file, manifest.dump(2) + "\n");
    return result;
}

// --- CLI -----------------------------------------------------------------------

namespace {

std::vector<double> parse_lambda_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (is_blank(item))
            throw error(errc::invalid_range, "--sweep-lambda: empty entry");
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            throw error(errc::invalid_range, "--sweep-lambda: bad number '" + item + "'");
        }
        if (used != item.size())
            throw error(errc::invalid_range, "--sweep-lambda: bad number '" + item + "'");
        out.push_back(v);
    }
    if (out.empty())
        throw error(errc::invalid_range, "--sweep-lambda: no values");
    return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
}

int cmd_ece(const std::string& log_path, std::size_t bins, double tau,
            const std::string& json_path, const std::string& csv_path, std::ostream& out) {
    const prediction_log log = read_prediction_log(log_path);
    std::vector<calib::prediction_record> records;
    records.reserve(log.pairs.size());
    for (const auto& pair : log.pairs)
        records.push_back(calib::make_record(pair.logits, tau, pair.label));
    const calib::calibration_report report = calib::ece(records, bins);

    json summary;
    summary["ece"] = report.ece;
    summary["accuracy"] = report.accuracy;
    summary["mean_confidence"] = report.mean_confidence;
    const std::string summary_text = summary.dump(2) + "\n";
    if (json_path.empty())
        out << summary_text;
    else
        atomic_write(json_path, summary_text);

    std::ostringstream csv;
    csv << "bin_lo,bin_hi,count,acc,conf\n";
    for (const auto& bin : report.bins.bins)
        csv << format_double(bin.lo) << ',' << format_double(bin.hi) << ',' << bin.count
            << ',' << format_double(bin.accuracy) << ','
            << format_double(bin.mean_confidence) << '\n';
    const std::string csv_target =
        csv_path.empty() ? log_path + ".reliability.csv" : csv_path;
    atomic_write(csv_target, csv.str());
    return 0;
}

int cmd_atfd(const std::string& embeddings_path, const std::string& csv_path,
             std::ostream& out) {
    const embedding_file file = read_embedding_file(embeddings_path);
    std::ostringstream csv;
    csv << "prompt_id,atfd,n_classes\n";
    for (const auto& set : file.sets) {
        dispersion::text_feature_set features;
        features.features = set.features;
        features.class_ids.resize(set.features.size());
        for (std::size_t i = 0; i < set.features.size(); ++i) features.class_ids[i] = i;
        try {
            const dispersion::dispersion_stats stats = dispersion::atfd(features);
            csv << set.prompt_id << ',' << format_double(stats.atfd) << ','
                << set.features.size() << '\n';
        } catch (const error& e) {
            if (e.code() != errc::dimension_mismatch) throw;
            throw error(errc::dimension_mismatch,
                        "prompt '" + set.prompt_id + "': " + e.what());
        }
    }
    if (csv_path.empty())
        out << csv.str();
    else
        atomic_write(csv_path, csv.str());
    return 0;
}

int cmd_correlate(const std::string& csv_path, double band, std::ostream& out) {
    std::ifstream in(csv_path);
    if (!in)
        throw error(errc::io_error, "cannot open '" + csv_path + "'");
    std::string header;
    if (!std::getline(in, header))
        throw error(errc::empty_record_set, "'" + csv_path + "' is empty");
    const std::vector<std::string> columns = split_csv_line(header);
    long acc_col = -1, ece_col = -1, atfd_col = -1;
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (columns[i] == "accuracy") acc_col = static_cast<long>(i);
        if (columns[i] == "ece") ece_col = static_cast<long>(i);
        if (columns[i] == "atfd") atfd_col = static_cast<long>(i);
    }
    if (acc_col < 0 || ece_col < 0 || atfd_col < 0)
        throw error(errc::schema_error,
                    "'" + csv_path + "' needs columns accuracy, ece, atfd");

    std::vector<dispersion::prompt_result> results;
    std::string line;
    std::size_t line_number = 1;
    while (std::getline(in, line)) {
        ++line_number;
        if (is_blank(line)) continue;
        const std::vector<std::string> cells = split_csv_line(line);
        const std::size_t needed = static_cast<std::size_t>(
            std::max(acc_col, std::max(ece_col, atfd_col)));
        if (cells.size() <= needed)
            fail_line(line_number, "too few columns");
        dispersion::prompt_result row;
        try {
            row.accuracy = std::stod(cells[acc_col]);
            row.ece = std::stod(cells[ece_col]);
            row.atfd = std::stod(cells[atfd_col]);
        } catch (const std::exception&) {
            fail_line(line_number, "bad numeric cell");
        }
        results.push_back(row);
    }
    if (results.empty())
        throw error(errc::empty_record_set, "'" + csv_path + "' holds no rows");

    const dispersion::family_correlation fam =
        dispersion::correlate_prompt_family(results, band);

    // same survivor set, rank correlation
    double best = results.front().accuracy;
    for (const auto& r : results) best = std::max(best, r.accuracy);
    std::vector<double> atfds, eces;
    for (const auto& r : results) {
        if (r.accuracy >= best - band) {
            atfds.push_back(r.atfd);
            eces.push_back(r.ece);
        }
    }
    const double rho = dispersion::spearman(atfds, eces);

    json summary;
    summary["pearson_r"] = fam.pearson_r;
    summary["spearman_rho"] = rho;
    summary["retained_count"] = fam.retained_count;
    out << summary.dump(2) << "\n";
    return 0;
}

int cmd_simulate(const std::string& config_path, const std::string& sweep_text,
                 const std::string& out_dir_override, std::ostream& out) {
    const std::string config_text = read_file(config_path);
    const experiment_spec spec = parse_experiment_config(config_text);
    std::vector<double> sweep;
    if (!sweep_text.empty()) sweep = parse_lambda_list(sweep_text);
    const std::filesystem::path out_dir =
        out_dir_override.empty() ? std::filesystem::path(spec.output_directory)
                                 : std::filesystem::path(out_dir_override);
    const simulate_result result =
        simulate_run(spec, config_text, sweep, out_dir, thread_cap_from_env());
    for (const auto& path : result.data_files) out << "wrote " << path.string() << "\n";
    out << "wrote " << result.manifest_file.string() << "\n";
    return 0;
}

int cmd_fit_temp(const std::string& log_path, double t_min, double t_max,
                 std::ostream& out) {
    const prediction_log log = read_prediction_log(log_path);
    const double t_star = calib::fit_temperature(log.pairs, t_min, t_max);
    json summary;
    summary["T_star"] = t_star;
    summary["nll_before"] = calib::mean_nll(log.pairs, 1.0);
    summary["nll_after"] = calib::mean_nll(log.pairs, t_star);
    out << summary.dump(2) << "\n";
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"calibrated test-time prompt tuning: simulator, metrics and fits"};
    app.require_subcommand(1);

    std::string ece_log, ece_json, ece_csv;
    std::size_t ece_bins = 15;
    double ece_tau = 1.0;
    CLI::App* ece_cmd = app.add_subcommand("ece", "Expected calibration error of a JSONL log");
    ece_cmd->add_option("log", ece_log, "prediction log (JSONL)")->required();
    ece_cmd->add_option("--bins", ece_bins, "number of reliability bins");
    ece_cmd->add_option("--tau", ece_tau, "softmax temperature applied to the logits");
    ece_cmd->add_option("--json", ece_json, "write the summary JSON here instead of stdout");
    ece_cmd->add_option("--csv", ece_csv, "reliability CSV path (default <log>.reliability.csv)");

    std::string atfd_path, atfd_csv;
    CLI::App* atfd_cmd = app.add_subcommand("atfd", "Text feature dispersion per prompt");
    atfd_cmd->add_option("embeddings", atfd_path, "embedding file (JSON)")->required();
    atfd_cmd->add_option("--csv", atfd_csv, "write the table here instead of stdout");

    std::string corr_path;
    double corr_band = 0.03;
    CLI::App* corr_cmd =
        app.add_subcommand("correlate", "Dispersion vs calibration over a prompt family");
    corr_cmd->add_option("results", corr_path, "CSV with accuracy, ece, atfd columns")
        ->required();
    corr_cmd->add_option("--band", corr_band, "accuracy band below the best prompt");

    std::string sim_config, sim_sweep, sim_out_dir;
    CLI::App* sim_cmd = app.add_subcommand("simulate", "Run a synthetic-encoder experiment");
    sim_cmd->add_option("config", sim_config, "experiment config (JSON)")->required();
    sim_cmd->add_option("--sweep-lambda", sim_sweep, "comma-separated lambda values");
    sim_cmd->add_option("--out-dir", sim_out_dir, "override the config's output directory");

    std::string fit_log;
    double fit_t_min = 1e-3, fit_t_max = 1e3;
    CLI::App* fit_cmd = app.add_subcommand("fit-temp", "Fit a scaling temperature to a log");
    fit_cmd->add_option("log", fit_log, "labeled prediction log (JSONL)")->required();
    fit_cmd->add_option("--t-min", fit_t_min, "lower search bound");
    fit_cmd->add_option("--t-max", fit_t_max, "upper search bound");

    std::vector<const char*> argv;
    argv.push_back("caltune");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (app.got_subcommand(ece_cmd))
            return cmd_ece(ece_log, ece_bins, ece_tau, ece_json, ece_csv, out);
        if (app.got_subcommand(atfd_cmd)) return cmd_atfd(atfd_path, atfd_csv, out);
        if (app.got_subcommand(corr_cmd)) return cmd_correlate(corr_path, corr_band, out);
        if (app.got_subcommand(sim_cmd))
            return cmd_simulate(sim_config, sim_sweep, sim_out_dir, out);
        if (app.got_subcommand(fit_cmd))
            return cmd_fit_temp(fit_log, fit_t_min, fit_t_max, out);
    } catch (const error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    }
    err << "error: no command\n";
    return 2;
}

} // namespace caltune::io
