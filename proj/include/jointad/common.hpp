#ifndef JOINTAD_COMMON_HPP
#define JOINTAD_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace jointad {

// Malformed or truncated container files. what() names the offending field.
class format_error : public std::runtime_error {
 public:
  explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Input admits no meaningful result (constant grid, empty foreground, ...).
class degenerate_input_error : public std::runtime_error {
 public:
  explicit degenerate_input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A zero-norm latent cannot enter a cosine similarity.
class degenerate_latent_error : public std::runtime_error {
 public:
  explicit degenerate_latent_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Slice-level loss weight is undefined when a batch holds no abnormal slice.
class class_imbalance_error : public std::runtime_error {
 public:
  explicit class_imbalance_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A metric that has no defined value on the given inputs.
class undefined_metric_error : public std::runtime_error {
 public:
  explicit undefined_metric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A loss component left the finite range during training.
class numeric_divergence_error : public std::runtime_error {
 public:
  numeric_divergence_error(const std::string& component, double value)
      : std::runtime_error("non-finite loss component '" + component +
                           "' (value = " + std::to_string(value) + ")"),
        component_(component) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

// Missing or inconsistent run configuration.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace jointad

#endif  // JOINTAD_COMMON_HPP
