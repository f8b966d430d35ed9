#pragma once

#include <stdexcept>
#include <string>

namespace maunet {

// Root of every error thrown by the library. The CLI maps subclasses onto
// exit codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class GraphError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };
class IndexError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class NameMismatchError : public Error { public: using Error::Error; };
class PairingError : public Error { public: using Error::Error; };
class EmptyError : public Error { public: using Error::Error; };

}  // namespace maunet
