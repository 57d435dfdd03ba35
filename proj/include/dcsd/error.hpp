#pragma once

#include <stdexcept>
#include <string>

namespace dcsd {

// Every failure the library reports derives from Error. kind() is the
// machine-readable category surfaced by the CLI in its error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define DCSD_DEFINE_ERROR(Name, tag)                                    \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(tag, what) {}        \
  };

DCSD_DEFINE_ERROR(ShapeError, "shape")
DCSD_DEFINE_ERROR(IndexError, "index")
DCSD_DEFINE_ERROR(LabelError, "label")
DCSD_DEFINE_ERROR(MiningError, "mining")
DCSD_DEFINE_ERROR(DegenerateBatchError, "degenerate_batch")
DCSD_DEFINE_ERROR(SpecError, "spec")
DCSD_DEFINE_ERROR(StateError, "state")
DCSD_DEFINE_ERROR(ConfigError, "config")
DCSD_DEFINE_ERROR(SamplerError, "sampler")
DCSD_DEFINE_ERROR(IoError, "io")
DCSD_DEFINE_ERROR(CheckpointError, "checkpoint")
DCSD_DEFINE_ERROR(VariantError, "variant")

#undef DCSD_DEFINE_ERROR

}  // namespace dcsd
