class Solution(object):
    def sumTo(self, n):
        total = 0
        for i in range(1, n):
            total += i
        return total
