#pragma once

#include "attnhybrid/tensor.hpp"
#include "attnhybrid/ops.hpp"
#include "attnhybrid/attention.hpp"
#include "attnhybrid/layers.hpp"
#include "attnhybrid/backbones.hpp"
#include "attnhybrid/config.hpp"
#include "attnhybrid/image.hpp"
#include "attnhybrid/serialize.hpp"
#include "attnhybrid/explain.hpp"
#include "attnhybrid/data.hpp"
#include "attnhybrid/train.hpp"
#include "attnhybrid/stats.hpp"
#include "attnhybrid/protocol.hpp"
#include "attnhybrid/ci_test.hpp"
