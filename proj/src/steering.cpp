#include "substeer/steering.hpp"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace substeer::steering {

const char* to_string(Mode m) noexcept {
    switch (m) {
        case Mode::last_layer: return "last_layer";
        case Mode::multi_layer: return "multi_layer";
        case Mode::classifier_gated: return "classifier_gated";
    }
    return "unknown";
}

Mode parse_mode(const std::string& s) {
    if (s == "last_layer") return Mode::last_layer;
    if (s == "multi_layer") return Mode::multi_layer;
    if (s == "classifier_gated") return Mode::classifier_gated;
    throw ParameterError("steering: unknown mode '" + s + "' (expected last_layer, multi_layer or classifier_gated)");
}

void SteeringConfig::validate(int n_layers) const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("steering: beta must lie in [0, 1]");
    if (!(gate_threshold >= 0.0 && gate_threshold <= 1.0)) {
        throw ParameterError("steering: gate_threshold must lie in [0, 1]");
    }
    if (!(multi_beta_scale >= 0.0 && multi_beta_scale <= 1.0)) {
        throw ParameterError("steering: multi_beta_scale must lie in [0, 1]");
    }
    if (mode == Mode::multi_layer) {
        if (layers.empty()) throw ParameterError("steering: multi_layer mode needs at least one layer");
        for (int l : layers) {
            if (l != kHeadLayer && (l < 0 || l >= n_layers)) {
                throw ParameterError("steering: layer " + std::to_string(l) + " outside [0, " +
                                     std::to_string(n_layers) + ") and not the head point (-1)");
            }
        }
    } else if (!layers.empty()) {
        throw ParameterError(std::string("steering: layers are only valid in multi_layer mode, not ") +
                             to_string(mode));
    }
}

nlohmann::json SteeringConfig::to_json() const {
    nlohmann::json j{{"mode", to_string(mode)}, {"beta", beta}};
    if (mode == Mode::multi_layer) {
        j["layers"] = layers;
        j["multi_beta_scale"] = multi_beta_scale;
    }
    if (mode == Mode::classifier_gated) j["gate_threshold"] = gate_threshold;
    return j;
}

SteeringConfig SteeringConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"mode", "beta", "layers", "gate_threshold", "multi_beta_scale"};
    SteeringConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (!known.contains(key)) throw ParameterError("steering config: unknown key '" + key + "'");
        }
        if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
        c.beta = j.value("beta", c.beta);
        c.layers = j.value("layers", c.layers);
        c.gate_threshold = j.value("gate_threshold", c.gate_threshold);
        c.multi_beta_scale = j.value("multi_beta_scale", c.multi_beta_scale);
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("steering config: ") + e.what());
    }
    return c;
}

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

} // namespace

double GateClassifier::score(std::span<const double> h) const {
    if (h.size() != weights.size()) {
        throw ParameterError("gate: hidden size " + std::to_string(h.size()) + " != " +
                             std::to_string(weights.size()));
    }
    return sigmoid(linalg::dot(weights, h) + bias);
}

void GateClassifier::validate() const {
    if (weights.empty()) throw DataError("gate: empty weight vector");
    for (double w : weights) {
        if (!std::isfinite(w)) throw DataError("gate: non-finite weight");
    }
    if (!std::isfinite(bias)) throw DataError("gate: non-finite bias");
}

nlohmann::json GateClassifier::to_json() const {
    return {{"weights", weights},
            {"bias", bias},
            {"metadata",
             {{"epochs", epochs},
              {"learning_rate", learning_rate},
              {"l2", l2},
              {"n_positive", n_positive},
              {"n_negative", n_negative}}}};
}

GateClassifier GateClassifier::from_json(const nlohmann::json& j) {
    GateClassifier g;
    try {
        g.weights = j.at("weights").get<std::vector<double>>();
        g.bias = j.at("bias").get<double>();
        const auto& m = j.at("metadata");
        g.epochs = m.value("epochs", std::size_t{0});
        g.learning_rate = m.value("learning_rate", 0.0);
        g.l2 = m.value("l2", 0.0);
        g.n_positive = m.value("n_positive", std::size_t{0});
        g.n_negative = m.value("n_negative", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("gate: ") + e.what());
    }
    g.validate();
    return g;
}

GateClassifier train_gate_classifier(const linalg::Matrix& positives, const linalg::Matrix& negatives,
                                     const GateOptions& options) {
    if (positives.rows() == 0 || negatives.rows() == 0) {
        throw ParameterError("train_gate_classifier: both classes need at least one example (got " +
                             std::to_string(positives.rows()) + " positive, " + std::to_string(negatives.rows()) +
                             " negative)");
    }
    if (positives.cols() != negatives.cols()) throw ParameterError("train_gate_classifier: dimension mismatch");
    if (!(options.learning_rate > 0.0) || options.l2 < 0.0) {
        throw ParameterError("train_gate_classifier: learning rate must be positive and l2 non-negative");
    }
    const std::size_t d = positives.cols();
    const double n = static_cast<double>(positives.rows() + negatives.rows());
    GateClassifier g;
    g.weights.assign(d, 0.0);
    g.epochs = options.epochs;
    g.learning_rate = options.learning_rate;
    g.l2 = options.l2;
    g.n_positive = positives.rows();
    g.n_negative = negatives.rows();

    std::vector<double> gw(d);
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        auto accumulate = [&](const linalg::Matrix& x, double label) {
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const auto row = x.row(i);
                const double err = sigmoid(linalg::dot(g.weights, row) + g.bias) - label;
                for (std::size_t j = 0; j < d; ++j) gw[j] += err * row[j];
                gb += err;
            }
        };
        accumulate(positives, 1.0);
        accumulate(negatives, 0.0);
        for (std::size_t j = 0; j < d; ++j) g.weights[j] -= options.learning_rate * (gw[j] / n + options.l2 * g.weights[j]);
        g.bias -= options.learning_rate * gb / n;
    }
    g.validate();
    return g;
}

double gate_accuracy(const GateClassifier& gate, const linalg::Matrix& positives, const linalg::Matrix& negatives) {
    const std::size_t total = positives.rows() + negatives.rows();
    if (total == 0) throw ParameterError("gate_accuracy: no examples");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < positives.rows(); ++i) correct += gate.score(positives.row(i)) >= 0.5;
    for (std::size_t i = 0; i < negatives.rows(); ++i) correct += gate.score(negatives.row(i)) < 0.5;
    return static_cast<double>(correct) / static_cast<double>(total);
}

void save_gate(const GateClassifier& gate, const std::filesystem::path& path) {
    io::write_text_atomic(path, gate.to_json().dump(2) + "\n");
}

GateClassifier load_gate(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    try {
        return GateClassifier::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("gate file " + path.string() + ": " + e.what());
    }
}

std::vector<double> steer_hidden(std::span<const double> h, const SteeringConfig& config,
                                 const linalg::SubspaceBasis& basis, const GateClassifier* gate) {
    if (h.size() != basis.dim()) {
        throw ParameterError("steer_hidden: hidden size " + std::to_string(h.size()) + " != subspace dim " +
                             std::to_string(basis.dim()));
    }
    if (config.mode == Mode::classifier_gated) {
        if (!gate) throw ParameterError("steer_hidden: classifier_gated mode needs a gate classifier");
        if (gate->score(h) < config.gate_threshold) return {h.begin(), h.end()};
    }
    return linalg::project_out(h, basis, config.layer_beta());
}

SteeringHook::SteeringHook(SteeringConfig config, linalg::SubspaceBasis basis, std::optional<GateClassifier> gate)
    : config_(std::move(config)), basis_(std::move(basis)), gate_(std::move(gate)), layer_beta_(config_.layer_beta()) {
    if (config_.mode == Mode::classifier_gated) {
        if (!gate_) throw ParameterError("steering: classifier_gated mode needs a gate classifier");
        if (gate_->weights.size() != basis_.dim()) throw ParameterError("steering: gate dimension mismatch");
    }
}

bool SteeringHook::wants(int layer) const {
    if (config_.mode == Mode::multi_layer) {
        return std::find(config_.layers.begin(), config_.layers.end(), layer) != config_.layers.end();
    }
    return layer == kHeadLayer;
}

bool SteeringHook::modifies(std::span<const double> h) const {
    if (layer_beta_ == 0.0) return false;
    if (config_.mode == Mode::classifier_gated) return gate_->score(h) >= config_.gate_threshold;
    return true;
}

void SteeringHook::apply(int, std::span<double> h) const {
    if (!modifies(h)) return;
    linalg::project_out_inplace(h, basis_, layer_beta_);
}

std::unique_ptr<SteeringHook> make_decode_hook(const SteeringConfig& config, const ToxicSubspace& subspace,
                                               const lm::ModelConfig& model, const GateClassifier* gate) {
    config.validate(model.n_layers);
    if (subspace.dim() != static_cast<std::size_t>(model.d_model)) {
        throw ParameterError("steering: subspace dim " + std::to_string(subspace.dim()) + " != model width " +
                             std::to_string(model.d_model));
    }
    std::optional<GateClassifier> g;
    if (gate) g = *gate;
    return std::make_unique<SteeringHook>(config, subspace.basis, std::move(g));
}

} // namespace substeer::steering
