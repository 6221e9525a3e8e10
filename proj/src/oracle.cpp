#include "ccbm/oracle.hpp"

#include "ccbm/errors.hpp"

namespace ccbm {

std::string to_string(OracleMode mode) {
  switch (mode) {
    case OracleMode::kPriorOnly:
      return "prior_only";
    case OracleMode::kPartialPosterior:
      return "partial_posterior";
    case OracleMode::kFullPosterior:
      return "full_posterior";
  }
  return "partial_posterior";
}

OracleMode oracle_mode_from_string(const std::string& name) {
  if (name == "prior_only") return OracleMode::kPriorOnly;
  if (name == "partial_posterior") return OracleMode::kPartialPosterior;
  if (name == "full_posterior") return OracleMode::kFullPosterior;
  throw ConfigError("unknown oracle mode: " + name);
}

std::string to_string(AnnotationSource source) {
  switch (source) {
    case AnnotationSource::kLlm:
      return "llm";
    case AnnotationSource::kPool:
      return "pool";
    case AnnotationSource::kHumanOverride:
      return "human-override";
  }
  return "pool";
}

AnnotationSource annotation_source_from_string(const std::string& name) {
  if (name == "llm") return AnnotationSource::kLlm;
  if (name == "pool") return AnnotationSource::kPool;
  if (name == "human-override") return AnnotationSource::kHumanOverride;
  throw ConfigError("unknown annotation source: " + name);
}

}  // namespace ccbm
