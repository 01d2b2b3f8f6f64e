#pragma once

#include "substeer/artifacts.hpp"
#include "substeer/linalg.hpp"
#include "substeer/toy_lm.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace substeer::steering {

enum class Mode { last_layer, multi_layer, classifier_gated };

const char* to_string(Mode m) noexcept;
Mode parse_mode(const std::string& s);

struct SteeringConfig {
    Mode mode = Mode::last_layer;
    double beta = 0.5;
    std::vector<int> layers;        // multi_layer only
    double gate_threshold = 0.5;    // classifier_gated only
    double multi_beta_scale = 0.5;  // multi_layer applies beta * multi_beta_scale per layer

    // Checks ranges and mode-specific fields against a model with n_layers blocks.
    void validate(int n_layers) const;
    double layer_beta() const noexcept { return mode == Mode::multi_layer ? beta * multi_beta_scale : beta; }

    nlohmann::json to_json() const;
    static SteeringConfig from_json(const nlohmann::json& j);
};

struct GateOptions {
    std::size_t epochs = 500;
    double learning_rate = 0.1;
    double l2 = 0.0;
};

struct GateClassifier {
    std::vector<double> weights;
    double bias = 0.0;
    std::size_t epochs = 0;
    double learning_rate = 0.0;
    double l2 = 0.0;
    std::size_t n_positive = 0;
    std::size_t n_negative = 0;

    double score(std::span<const double> h) const;  // sigmoid(w.h + b)
    void validate() const;

    nlohmann::json to_json() const;
    static GateClassifier from_json(const nlohmann::json& j);
};

// Full-batch gradient descent on the mean logistic loss (+ l2/2 |w|^2), from zero.
GateClassifier train_gate_classifier(const linalg::Matrix& positives, const linalg::Matrix& negatives,
                                     const GateOptions& options = {});

// Fraction of rows classified correctly at the 0.5 threshold.
double gate_accuracy(const GateClassifier& gate, const linalg::Matrix& positives, const linalg::Matrix& negatives);

void save_gate(const GateClassifier& gate, const std::filesystem::path& path);
GateClassifier load_gate(const std::filesystem::path& path);

// One-step transform of h. `gate` is required in classifier_gated mode.
std::vector<double> steer_hidden(std::span<const double> h, const SteeringConfig& config,
                                 const linalg::SubspaceBasis& basis, const GateClassifier* gate = nullptr);

// Decode-time hook. Immutable after construction; owns copies of the basis and gate.
class SteeringHook : public lm::HiddenStateHook {
public:
    SteeringHook(SteeringConfig config, linalg::SubspaceBasis basis, std::optional<GateClassifier> gate);

    bool wants(int layer) const override;
    void apply(int layer, std::span<double> h) const override;

    const SteeringConfig& config() const noexcept { return config_; }
    // Whether the hook would modify h at the head point (gate decision included).
    bool modifies(std::span<const double> h) const;

private:
    SteeringConfig config_;
    linalg::SubspaceBasis basis_;
    std::optional<GateClassifier> gate_;
    double layer_beta_;
};

std::unique_ptr<SteeringHook> make_decode_hook(const SteeringConfig& config, const ToxicSubspace& subspace,
                                               const lm::ModelConfig& model, const GateClassifier* gate = nullptr);

} // namespace substeer::steering
