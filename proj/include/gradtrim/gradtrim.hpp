#pragma once

#include "gradtrim/common.hpp"
#include "gradtrim/dataset.hpp"
#include "gradtrim/harness.hpp"
#include "gradtrim/influence.hpp"
#include "gradtrim/model.hpp"
#include "gradtrim/outlier.hpp"
