#pragma once

#include <stdexcept>

namespace lrel {

struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct InputError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };
struct FormatError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ParseError : std::runtime_error { using std::runtime_error::runtime_error; };
struct VocabError : std::runtime_error { using std::runtime_error::runtime_error; };
struct SplitError : std::runtime_error { using std::runtime_error::runtime_error; };
struct EstimationError : std::runtime_error { using std::runtime_error::runtime_error; };
struct OperatorError : std::runtime_error { using std::runtime_error::runtime_error; };
struct EvalError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ProtocolError : std::runtime_error { using std::runtime_error::runtime_error; };
struct TrainError : std::runtime_error { using std::runtime_error::runtime_error; };

}  // namespace lrel
