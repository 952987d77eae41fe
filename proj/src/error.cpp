#include "ilm/error.hpp"

namespace ilm {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kDegenerateInput: return "degenerate-input error";
    case ErrorKind::kUsage: return "usage error";
    case ErrorKind::kNumerical: return "numerical error";
    case ErrorKind::kVocabulary: return "vocabulary error";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kCatalog: return "catalog error";
    case ErrorKind::kTemplate: return "template error";
    case ErrorKind::kStorage: return "storage error";
    case ErrorKind::kDependency: return "dependency error";
    case ErrorKind::kConfig: return "config error";
  }
  return "error";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return 2;
    case ErrorKind::kConfig: return 3;
    case ErrorKind::kDependency: return 4;
    case ErrorKind::kStorage: return 5;
    case ErrorKind::kParse:
    case ErrorKind::kCatalog:
    case ErrorKind::kTemplate: return 6;
    case ErrorKind::kNumerical: return 7;
    default: return 1;
  }
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

}  // namespace ilm
