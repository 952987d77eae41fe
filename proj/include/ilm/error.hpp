#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ilm {

enum class ErrorKind {
  kDimension,
  kDegenerateInput,
  kUsage,
  kNumerical,
  kVocabulary,
  kParse,
  kCatalog,
  kTemplate,
  kStorage,
  kDependency,
  kConfig,
};

std::string_view error_kind_name(ErrorKind kind);

// Process exit code used by the CLI for each error category.
int exit_code_for(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define ILM_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& message) : Error(Kind, message) {} \
  };

ILM_DEFINE_ERROR(DimensionError, ErrorKind::kDimension)
ILM_DEFINE_ERROR(DegenerateInputError, ErrorKind::kDegenerateInput)
ILM_DEFINE_ERROR(UsageError, ErrorKind::kUsage)
ILM_DEFINE_ERROR(NumericalError, ErrorKind::kNumerical)
ILM_DEFINE_ERROR(VocabularyError, ErrorKind::kVocabulary)
ILM_DEFINE_ERROR(ParseError, ErrorKind::kParse)
ILM_DEFINE_ERROR(CatalogError, ErrorKind::kCatalog)
ILM_DEFINE_ERROR(TemplateError, ErrorKind::kTemplate)
ILM_DEFINE_ERROR(StorageError, ErrorKind::kStorage)
ILM_DEFINE_ERROR(DependencyError, ErrorKind::kDependency)
ILM_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)

#undef ILM_DEFINE_ERROR

}  // namespace ilm
