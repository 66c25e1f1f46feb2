#pragma once

#include <torch/torch.h>

// c10 logging defines CHECK too; doctest's should win without a redefinition warning.
#undef CHECK
