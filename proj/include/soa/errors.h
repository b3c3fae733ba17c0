#ifndef SOA_ERRORS_H_
#define SOA_ERRORS_H_

#include <stdexcept>
#include <string>

namespace soa {

// Base of every error the library raises. Subclasses name the contract that
// was broken; callers that only care about failure can catch Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public Error { using Error::Error; };
class InputTooShortError : public Error { using Error::Error; };
class VocabularyError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class InfeasibleTargetError : public Error { using Error::Error; };
class UndefinedMetricError : public Error { using Error::Error; };
class IntegrityError : public Error { using Error::Error; };
class IncompatibleArchitectureError : public Error { using Error::Error; };
class DataContractError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };

}  // namespace soa

#define SOA_REQUIRE(cond, ErrorType, msg)                   \
  do {                                                      \
    if (!(cond)) throw ::soa::ErrorType(std::string(msg));  \
  } while (0)

#endif  // SOA_ERRORS_H_
