#pragma once

#include <stdexcept>
#include <string>

namespace pfedhr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
  using Error::Error;
};
struct NoTape : Error {
  using Error::Error;
};
struct UnknownTemplate : Error {
  using Error::Error;
};
struct EmptyTemplateList : Error {
  using Error::Error;
};
struct EmptyUpload : Error {
  using Error::Error;
};
struct TooFewLayers : Error {
  using Error::Error;
};
struct UnresolvableRef : Error {
  using Error::Error;
};
struct LabelFlagMismatch : Error {
  using Error::Error;
};
struct ClassCountMismatch : Error {
  using Error::Error;
};
struct ConfigInvalid : Error {
  using Error::Error;
};
struct BadMagic : Error {
  using Error::Error;
};
struct CountMismatch : Error {
  using Error::Error;
};
struct TruncatedFile : Error {
  using Error::Error;
};
struct InsufficientData : Error {
  using Error::Error;
};
struct IncompatibleSpec : Error {
  using Error::Error;
};

}  // namespace pfedhr
